"""Analytic energy/force calculators standing in for ML force fields and DFT.

Two calculators share one interface, :func:`evaluate`:

``LennardJonesPeriodic``
    Pairwise 12-6 Lennard-Jones over periodic images within a cutoff.

``SyntheticSitePES``
    A corrugated adsorption surface with analytically known structure::

        E = U(f) * m(h)                                  site term (adsorbate COM)
          + K (1 - u.p) * env(h)                          orientation term
          + sum_bonds D_b (1 - exp(-a_b (d - d0)))^2      adsorbate rigidity
          + k_t / 2 sum_free |x - x_ref|^2                slab tethers

    with ``U(f) = D0 + sum_k A_k cos(2 pi k.f + phi_k)`` over the in-plane
    fractional COM coordinates ``f``, ``m(h) = (1 - exp(-a (h - h0)))^2 - 1``
    a Morse profile in the COM height ``h`` above the surface plane, ``u`` the
    adsorbate's designated axis and ``p`` a preferred surface direction.
    In-plane local minima at fixed height and orientation are the maxima of
    ``U``; the Fourier coefficients are generated from periodised Gaussian
    wells so the number of minima is controlled by the preset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ContractViolation, NumericalBlowup
from .lattice import (
    AdslabSystem,
    LatticeCell,
    Tag,
    minimum_image,
    periodic_neighbors,
    to_fractional,
    whole_adsorbate,
)

OVERLAP_DISTANCE = 0.1


@dataclass
class EnergyForces:
    energy: float
    forces: np.ndarray


@dataclass
class LennardJonesPeriodic:
    """12-6 LJ with per-species-pair parameters; ``pairs`` maps "Zi-Zj" to (eps eV, sigma Å)."""

    epsilon: float = 0.1
    sigma: float = 2.5
    cutoff: float = 7.0
    pairs: dict = field(default_factory=dict)
    kind: str = "LennardJonesPeriodic"

    def __post_init__(self):
        self.pairs = {self._key(*map(int, k.split("-"))) if isinstance(k, str) else self._key(*k): tuple(v)
                      for k, v in self.pairs.items()}
        for eps, sig in [(self.epsilon, self.sigma), *self.pairs.values()]:
            if eps <= 0 or sig <= 0:
                raise ContractViolation("LJ epsilon and sigma must be positive")
            if self.cutoff < 2 * sig:
                raise ContractViolation(f"cutoff {self.cutoff} < 2 sigma ({2 * sig})")

    @staticmethod
    def _key(a, b) -> str:
        a, b = sorted((int(a), int(b)))
        return f"{a}-{b}"

    def params_for(self, zi, zj) -> tuple[np.ndarray, np.ndarray]:
        eps = np.full(len(zi), self.epsilon)
        sig = np.full(len(zi), self.sigma)
        for k, (e, s) in self.pairs.items():
            a, b = map(int, k.split("-"))
            m = ((zi == a) & (zj == b)) | ((zi == b) & (zj == a))
            eps[m], sig[m] = e, s
        return eps, sig

    def to_dict(self) -> dict:
        return {"kind": self.kind, "epsilon": self.epsilon, "sigma": self.sigma,
                "cutoff": self.cutoff, "pairs": {k: list(v) for k, v in self.pairs.items()}}


@dataclass
class SyntheticSitePES:
    fourier_k: np.ndarray
    fourier_amp: np.ndarray
    fourier_phase: np.ndarray
    base_depth: float = 0.5
    z_surface: float = 7.0
    h0: float = 2.0
    morse_a: float = 1.5
    aniso_strength: float = 0.3
    aniso_angle: float = 0.0
    aniso_steepness: float = 2.0
    axis_atoms: Optional[tuple[int, int]] = (0, 1)
    bonds: list = field(default_factory=list)  # (i, j, d0) over adsorbate ordering
    bond_depth: float = 5.0
    bond_a: float = 2.0
    tether_k: float = 10.0
    tether_reference: Optional[np.ndarray] = None  # FREE_SLAB positions, in order
    wells: list = field(default_factory=list)  # generating wells (documentation only)
    cutoff: float = 3.0
    kind: str = "SyntheticSitePES"

    def __post_init__(self):
        self.fourier_k = np.asarray(self.fourier_k, float).reshape(-1, 2)
        self.fourier_amp = np.asarray(self.fourier_amp, float).reshape(-1)
        self.fourier_phase = np.asarray(self.fourier_phase, float).reshape(-1)
        if not (len(self.fourier_k) == len(self.fourier_amp) == len(self.fourier_phase)):
            raise ContractViolation("Fourier arrays must have equal length")
        if not (np.isfinite(self.fourier_amp).all() and np.isfinite(self.fourier_phase).all()):
            raise ContractViolation("PES amplitudes must be finite")
        if self.axis_atoms is not None:
            self.axis_atoms = tuple(int(i) for i in self.axis_atoms)
        self.bonds = [(int(i), int(j), float(d)) for i, j, d in self.bonds]
        if self.tether_reference is not None:
            self.tether_reference = np.asarray(self.tether_reference, float).reshape(-1, 3)

    def corrugation(self, f) -> np.ndarray:
        """U(f) for in-plane fractional coordinates ``f`` (..., 2)."""
        f = np.asarray(f, float)
        arg = 2 * np.pi * (f @ self.fourier_k.T) + self.fourier_phase
        return self.base_depth + np.cos(arg) @ self.fourier_amp

    def corrugation_grad(self, f) -> np.ndarray:
        f = np.asarray(f, float)
        arg = 2 * np.pi * (f @ self.fourier_k.T) + self.fourier_phase
        return -(np.sin(arg) * self.fourier_amp) @ (2 * np.pi * self.fourier_k)

    def preferred_direction(self, cell: LatticeCell) -> np.ndarray:
        a = np.array([cell.basis[0, 0], cell.basis[0, 1], 0.0])
        a /= np.linalg.norm(a)
        perp = np.array([-a[1], a[0], 0.0])
        return np.cos(self.aniso_angle) * a + np.sin(self.aniso_angle) * perp

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "fourier_k": self.fourier_k.tolist(),
            "fourier_amp": self.fourier_amp.tolist(),
            "fourier_phase": self.fourier_phase.tolist(),
            "base_depth": self.base_depth,
            "z_surface": self.z_surface,
            "h0": self.h0,
            "morse_a": self.morse_a,
            "aniso_strength": self.aniso_strength,
            "aniso_angle": self.aniso_angle,
            "aniso_steepness": self.aniso_steepness,
            "axis_atoms": list(self.axis_atoms) if self.axis_atoms is not None else None,
            "bonds": [list(b) for b in self.bonds],
            "bond_depth": self.bond_depth,
            "bond_a": self.bond_a,
            "tether_k": self.tether_k,
            "tether_reference": None if self.tether_reference is None else self.tether_reference.tolist(),
            "wells": self.wells,
            "cutoff": self.cutoff,
        }


CalculatorSpec = Union[LennardJonesPeriodic, SyntheticSitePES]


def calculator_from_dict(d: dict) -> CalculatorSpec:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "LennardJonesPeriodic":
        return LennardJonesPeriodic(**d)
    if kind == "SyntheticSitePES":
        if d.get("axis_atoms") is not None:
            d["axis_atoms"] = tuple(d["axis_atoms"])
        return SyntheticSitePES(**d)
    raise ContractViolation(f"unknown calculator kind {kind!r}")


# -- periodic Gaussian wells -> Fourier coefficients -------------------------


def wells_to_fourier(cell: LatticeCell, wells, rel_tol=1e-7, k_max=24):
    """Fourier coefficients of ``sum_w depth_w * sum_R exp(-|r - c_w - R|^2 / 2 s_w^2)``.

    ``wells`` is a list of dicts with ``center`` (fractional, 2), ``depth`` (eV)
    and ``width`` (Å). Returns ``(k, amp, phase, offset)`` with ``k`` over a
    half plane (cosines of k and -k are merged) and ``offset`` the k = 0 term.
    """
    b = 2 * np.pi * np.linalg.inv(cell.in_plane).T  # rows: in-plane reciprocal vectors
    rng_k = np.arange(-k_max, k_max + 1)
    kk = np.stack(np.meshgrid(rng_k, rng_k, indexing="ij"), -1).reshape(-1, 2)
    half = (kk[:, 0] > 0) | ((kk[:, 0] == 0) & (kk[:, 1] > 0))
    kk = kk[half]
    G = kk @ b
    coeff = np.zeros(len(kk), complex)
    offset = 0.0
    for w in wells:
        s = float(w["width"])
        pref = float(w["depth"]) * 2 * np.pi * s**2 / cell.area
        c = np.asarray(w["center"], float)
        amp = 2 * pref * np.exp(-0.5 * s**2 * np.einsum("ij,ij->i", G, G))
        coeff += amp * np.exp(-2j * np.pi * (kk @ c))
        offset += pref
    mag = np.abs(coeff)
    keep = mag > rel_tol * max(mag.max(), offset)
    return kk[keep].astype(float), mag[keep], np.angle(coeff[keep]), offset


# -- evaluation ---------------------------------------------------------------


def _check_overlaps(cell, positions):
    n = len(positions)
    if n < 2:
        return
    iu, ju = np.triu_indices(n, 1)
    d = np.linalg.norm(minimum_image(cell, positions[ju] - positions[iu]), axis=-1)
    bad = np.nonzero(d < OVERLAP_DISTANCE)[0]
    if len(bad):
        i, j = int(iu[bad[0]]), int(ju[bad[0]])
        raise NumericalBlowup(f"atoms {i} and {j} overlap (d = {d[bad[0]]:.3g} Å)", pair=(i, j))


def _lj_energy_forces(spec: LennardJonesPeriodic, positions, species, cell):
    i, j, _, vec, r = periodic_neighbors(cell, positions, spec.cutoff)
    if np.any(r < OVERLAP_DISTANCE):
        k = int(np.argmin(r))
        raise NumericalBlowup(f"atoms {i[k]} and {j[k]} overlap", pair=(int(i[k]), int(j[k])))
    eps, sig = spec.params_for(species[i], species[j])
    sr6 = (sig / r) ** 6
    energy = 0.5 * np.sum(4 * eps * (sr6**2 - sr6))
    dphi = 4 * eps * (-12 * sr6**2 + 6 * sr6) / r
    forces = np.zeros_like(positions)
    np.add.at(forces, i, (dphi / r)[:, None] * vec)
    return float(energy), forces


def synthetic_energy_forces(spec: SyntheticSitePES, positions, tags, cell: LatticeCell):
    """Energy (B,) and forces (B, N, 3) for a batch of configurations (B, N, 3)."""
    x = np.asarray(positions, float)
    single = x.ndim == 2
    if single:
        x = x[None]
    B = x.shape[0]
    energy = np.zeros(B)
    grad = np.zeros_like(x)
    ads = np.nonzero(tags == Tag.ADSORBATE)[0]
    free = np.nonzero(tags == Tag.FREE_SLAB)[0]

    if len(ads) > 1:
        # make the adsorbate whole so atoms split across the boundary still form one molecule
        x = x.copy()
        ref = x[:, ads[:1]]
        x[:, ads] = ref + minimum_image(cell, x[:, ads] - ref).reshape(B, len(ads), 3)

    if len(ads):
        n = len(ads)
        com = x[:, ads].mean(axis=1)
        f = to_fractional(cell, com)
        fxy = f[:, :2]
        U = spec.corrugation(fxy)
        dU_df = spec.corrugation_grad(fxy)
        dU_dc = dU_df @ cell.inverse[:, :2].T
        h = com[:, 2] - spec.z_surface
        e = np.exp(np.minimum(-spec.morse_a * (h - spec.h0), 300.0))
        m = (1 - e) ** 2 - 1
        dm = 2 * (1 - e) * spec.morse_a * e
        energy += U * m
        g_com = m[:, None] * dU_dc
        g_com[:, 2] += U * dm

        if spec.axis_atoms is not None and n >= 2 and spec.aniso_strength != 0:
            i0, i1 = ads[spec.axis_atoms[0]], ads[spec.axis_atoms[1]]
            u = x[:, i1] - x[:, i0]
            un = np.linalg.norm(u, axis=1)
            uh = u / un[:, None]
            p = spec.preferred_direction(cell)
            cosang = uh @ p
            ex = np.exp(np.minimum(spec.aniso_steepness * (h - spec.h0), 300.0))
            env = 2.0 / (1.0 + ex)
            denv = -2.0 * spec.aniso_steepness * ex / (1.0 + ex) ** 2
            K = spec.aniso_strength
            energy += K * (1 - cosang) * env
            d_cos_du = (p[None, :] - cosang[:, None] * uh) / un[:, None]
            gu = -K * env[:, None] * d_cos_du
            grad[:, i1] += gu
            grad[:, i0] -= gu
            g_com[:, 2] += K * (1 - cosang) * denv

        grad[:, ads] += g_com[:, None, :] / n

        for bi, bj, d0 in spec.bonds:
            ia, ja = ads[bi], ads[bj]
            v = minimum_image(cell, x[:, ja] - x[:, ia])
            d = np.linalg.norm(v, axis=1)
            eb = np.exp(np.minimum(-spec.bond_a * (d - d0), 300.0))
            energy += spec.bond_depth * (1 - eb) ** 2
            dd = 2 * spec.bond_depth * (1 - eb) * spec.bond_a * eb
            gv = (dd / d)[:, None] * v
            grad[:, ja] += gv
            grad[:, ia] -= gv

    if len(free) and spec.tether_reference is not None and spec.tether_k > 0:
        if len(spec.tether_reference) != len(free):
            raise ContractViolation("tether reference does not match FREE_SLAB atom count")
        dv = minimum_image(cell, x[:, free] - spec.tether_reference[None])
        energy += 0.5 * spec.tether_k * np.einsum("bij,bij->b", dv, dv)
        grad[:, free] += spec.tether_k * dv

    if single:
        return float(energy[0]), -grad[0]
    return energy, -grad


def energy_forces_arrays(spec: CalculatorSpec, positions, species, tags, cell) -> EnergyForces:
    positions = np.asarray(positions, float)
    if isinstance(spec, LennardJonesPeriodic):
        e, f = _lj_energy_forces(spec, positions, np.asarray(species), cell)
    else:
        _check_overlaps(cell, positions)
        e, f = synthetic_energy_forces(spec, positions, np.asarray(tags), cell)
    if not (np.isfinite(e) and np.isfinite(f).all()):
        raise NumericalBlowup("non-finite energy or forces")
    return EnergyForces(e, f)


def evaluate(spec: CalculatorSpec, system: AdslabSystem) -> EnergyForces:
    """Energy (eV) and analytic forces (eV/Å) of ``system``."""
    return energy_forces_arrays(spec, system.positions, system.species, system.tags, system.cell)


def adsorption_energy(e_total: float, e_slab: float, e_adsorbate: float) -> float:
    return e_total - e_slab - e_adsorbate


def reference_energies(spec: CalculatorSpec, system: AdslabSystem, template_offsets=None) -> tuple[float, float]:
    """(E_slab, E_adsorbate) for the isolated, relaxed components.

    For the synthetic PES the clean slab sits at its tether reference and the
    gas-phase adsorbate at its template geometry, both with zero energy by
    construction; they are still evaluated rather than assumed.
    """
    slab = system.slab_mask
    ads = system.adsorbate_mask
    if isinstance(spec, SyntheticSitePES):
        slab_pos = system.positions[slab].copy()
        free_in_slab = system.tags[slab] == Tag.FREE_SLAB
        if spec.tether_reference is not None:
            slab_pos[free_in_slab] = spec.tether_reference
        e_slab, _ = synthetic_energy_forces(spec, slab_pos, system.tags[slab], system.cell)
        ads_pos = whole_adsorbate(system)
        if template_offsets is not None:
            ads_pos = np.asarray(template_offsets, float) + ads_pos.mean(axis=0)
        # Gas phase: far above the surface the site and orientation terms vanish.
        gas = ads_pos + np.array([0.0, 0.0, 1e3])
        e_ads, _ = synthetic_energy_forces(spec, gas, system.tags[ads], system.cell)
        return float(e_slab), float(e_ads)
    e_slab = energy_forces_arrays(spec, system.positions[slab], system.species[slab], system.tags[slab], system.cell).energy
    e_ads = energy_forces_arrays(spec, system.positions[ads], system.species[ads], system.tags[ads], system.cell).energy
    return e_slab, e_ads


def system_adsorption_energy(spec: CalculatorSpec, system: AdslabSystem, template_offsets=None) -> float:
    e_slab, e_ads = reference_energies(spec, system, template_offsets)
    return adsorption_energy(evaluate(spec, system).energy, e_slab, e_ads)

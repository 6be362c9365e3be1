"""Synthetic adsorption benchmark: system generation, dense-grid oracle, protocols and metrics.

Each benchmark system is a two-layer square slab whose top layer mixes a host
metal with dopants. The adsorption PES has a Gaussian well above selected
top-layer atoms with a depth set by the atom's species, so the best site is a
property of the local atomic environment that a score model can learn.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .anomaly import AnomalyReport, AnomalyThresholds, classify
from .errors import ContractViolation, InsufficientData, OracleViolation
from .lattice import (
    AdslabSystem,
    AdsorbateTemplate,
    LatticeCell,
    Pose,
    Tag,
    adsorbate_orientation,
    adsorbate_site,
    center_of_mass,
    in_plane_distance,
    place_adsorbate,
    rotation_matrix,
    to_cartesian,
    to_fractional,
    wrap_fractional,
)
from .noise import NoiseSchedule, TrainingSample, relative_energies
from .potentials import (
    SyntheticSitePES,
    calculator_from_dict,
    reference_energies,
    synthetic_energy_forces,
    wells_to_fourier,
)
from .relax import RelaxConfig, relax
from .sampler import SamplerConfig, init_placement, sample_many, slab_only

log = logging.getLogger(__name__)

SUCCESS_MARGIN = 0.1  # eV
DISTANCE_THRESHOLD = 1.0  # Å
ORACLE_TOLERANCE = 1e-3  # eV, slack for "oracle energy is a lower bound"

# Well depth (eV) above a top-layer atom, by species.
SPECIES_DEPTH = {47: 0.25, 79: 0.30, 29: 0.40, 28: 0.55, 46: 0.70, 78: 0.85}
ID_METALS = (28, 29, 47, 78)
OOD_METALS = (46, 79)


def _linear(name, species, bond):
    return AdsorbateTemplate(name, species, [[0.0, 0.0, 0.0], [0.0, 0.0, bond]])


def _bent(name, species, bond, angle_deg):
    half = np.radians(angle_deg) / 2
    return AdsorbateTemplate(name, species, [
        [0.0, 0.0, 0.0],
        [bond * np.sin(half), 0.0, bond * np.cos(half)],
        [-bond * np.sin(half), 0.0, bond * np.cos(half)],
    ])


ADSORBATES = {
    "O": AdsorbateTemplate("O", [8], [[0.0, 0.0, 0.0]]),
    "N": AdsorbateTemplate("N", [7], [[0.0, 0.0, 0.0]]),
    "CO": _linear("CO", [6, 8], 1.15),
    "OH": _linear("OH", [8, 1], 0.97),
    "CH2": _bent("CH2", [6, 1, 1], 1.09, 110.0),
    "NO": _linear("NO", [7, 8], 1.15),
    "NH2": _bent("NH2", [7, 1, 1], 1.02, 105.0),
}
ID_ADSORBATES = ("O", "CO", "OH", "CH2")
OOD_ADSORBATES = ("N", "NO", "NH2")
# Scales all well depths for a given adsorbate (orderings are unchanged).
ADSORBATE_STRENGTH = {"O": 1.3, "N": 1.25, "CO": 1.0, "OH": 1.2, "CH2": 0.9, "NO": 1.1, "NH2": 0.95}


@dataclass(frozen=True)
class FamilySpec:
    """Parameters of a preset family of benchmark systems."""

    name: str
    n_dopants: int
    host_wells: bool
    width: float  # Å, Gaussian well width
    min_minima: int
    base_depth: float = 0.3
    depth_jitter: float = 0.02
    # Put dopants on a permutation pattern (one per row and column) so wells never merge.
    latin_sites: bool = False


# Widths are chosen so wells stay distinct minima while leaving no flat regions
# where a relaxation could stop far from any minimum.
FAMILIES = {
    "single_well": FamilySpec("single_well", 1, False, 2.0, 1),
    "three_well": FamilySpec("three_well", 3, False, 1.1, 3, latin_sites=True),
    "multi_well": FamilySpec("multi_well", 2, True, 0.75, 5),
}


@dataclass(frozen=True)
class BenchmarkConfig:
    n_systems: int = 20
    family: str = "multi_well"
    split: str = "ID"
    n_placements: int = 20  # K relaxed random placements per system
    grid: int = 64
    n_orientations: int = 8
    surface_size: int = 3
    seed: int = 0
    max_redraws: int = 10

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractViolation(f"unknown preset family {self.family!r}; known: {sorted(FAMILIES)}")
        if self.split not in ("ID", "OOD"):
            raise ContractViolation("split must be 'ID' or 'OOD'")
        if self.n_systems < 1 or self.n_placements < 1 or self.grid < 4 or self.n_orientations < 1:
            raise ContractViolation("benchmark sizes must be positive")


@dataclass
class LocalMinimum:
    pose: Pose
    energy: float
    site: np.ndarray

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "energy": self.energy, "site": self.site.tolist()}

    @classmethod
    def from_dict(cls, d) -> "LocalMinimum":
        return cls(Pose.from_dict(d["pose"]), float(d["energy"]), np.asarray(d["site"], float))


@dataclass
class BenchmarkSystem:
    system_id: str
    split: str
    family: str
    slab: AdslabSystem
    template: AdsorbateTemplate
    calculator: SyntheticSitePES
    e_slab: float
    e_adsorbate: float
    local_minima: list
    dataset: list = field(default_factory=list)
    relax_failures: int = 0

    def __post_init__(self):
        if not self.local_minima:
            raise ContractViolation(f"{self.system_id}: no local minima")
        self.local_minima = sorted(self.local_minima, key=lambda m: m.energy)

    @property
    def oracle_energy(self) -> float:
        return self.local_minima[0].energy

    @property
    def oracle_pose(self) -> Pose:
        return self.local_minima[0].pose

    @property
    def oracle_site(self) -> np.ndarray:
        return self.local_minima[0].site

    def adsorption_energy(self, total_energy: float) -> float:
        return total_energy - self.e_slab - self.e_adsorbate

    def to_dict(self) -> dict:
        return {
            "system_id": self.system_id,
            "split": self.split,
            "family": self.family,
            "slab": self.slab.to_dict(),
            "template": self.template.to_dict(),
            "calculator": self.calculator.to_dict(),
            "e_slab": self.e_slab,
            "e_adsorbate": self.e_adsorbate,
            "local_minima": [m.to_dict() for m in self.local_minima],
            "dataset": [s.to_dict() for s in self.dataset],
            "relax_failures": self.relax_failures,
        }

    @classmethod
    def from_dict(cls, d) -> "BenchmarkSystem":
        return cls(
            d["system_id"], d["split"], d["family"],
            AdslabSystem.from_dict(d["slab"]),
            AdsorbateTemplate.from_dict(d["template"]),
            calculator_from_dict(d["calculator"]),
            float(d["e_slab"]), float(d["e_adsorbate"]),
            [LocalMinimum.from_dict(m) for m in d["local_minima"]],
            [TrainingSample.from_dict(s) for s in d.get("dataset", [])],
            int(d.get("relax_failures", 0)),
        )


# -- system construction ------------------------------------------------------------


def build_slab(a: float, size: int, top_species, bottom_species: int, layer_gap: float = 2.0,
               z_bottom: float = 5.0, height: float = 25.0) -> AdslabSystem:
    """Two-layer square slab; bottom layer FIXED_SLAB in the hollows, top layer FREE_SLAB."""
    cell = LatticeCell.slab(size * a, size * a, height)
    pos, species, tags = [], [], []
    for i in range(size):
        for j in range(size):
            pos.append([(i + 0.5) * a, (j + 0.5) * a, z_bottom])
            species.append(bottom_species)
            tags.append(Tag.FIXED_SLAB)
    top = list(top_species)
    if len(top) != size * size:
        raise ContractViolation("need one species per top-layer site")
    for k, (i, j) in enumerate((i, j) for i in range(size) for j in range(size)):
        pos.append([i * a, j * a, z_bottom + layer_gap])
        species.append(top[k])
        tags.append(Tag.FREE_SLAB)
    return AdslabSystem(np.array(pos), np.array(species), np.array(tags), cell)


def design_wells(slab: AdslabSystem, family: FamilySpec, host: int, strength: float,
                 rng: np.random.Generator) -> list[dict]:
    """One Gaussian well per top-layer atom (host atoms only if the family says so)."""
    top = np.nonzero(slab.tags == Tag.FREE_SLAB)[0]
    f = to_fractional(slab.cell, slab.positions[top])[:, :2]
    wells = []
    for k, idx in enumerate(top):
        z = int(slab.species[idx])
        if z == host and not family.host_wells:
            continue
        depth = strength * SPECIES_DEPTH[z] + rng.uniform(-family.depth_jitter, family.depth_jitter)
        wells.append({"center": wrap_fractional(f[k]).tolist(), "depth": float(depth), "width": family.width,
                      "species": z})
    return wells


def make_calculator(slab: AdslabSystem, template: AdsorbateTemplate, wells, family: FamilySpec,
                    aniso_angle: float) -> SyntheticSitePES:
    k, amp, phase, offset = wells_to_fourier(slab.cell, wells)
    top = slab.tags == Tag.FREE_SLAB
    offsets = template.offsets
    bonds = [(i, j, float(np.linalg.norm(offsets[i] - offsets[j])))
             for i in range(len(template)) for j in range(i + 1, len(template))]
    return SyntheticSitePES(
        fourier_k=k, fourier_amp=amp, fourier_phase=phase,
        base_depth=family.base_depth + offset,
        z_surface=float(slab.positions[top, 2].max()),
        h0=2.0,
        aniso_angle=float(aniso_angle),
        axis_atoms=(0, 1) if len(template) >= 2 else None,
        bonds=bonds,
        tether_reference=slab.positions[top].copy(),
        wells=wells,
    )


def draw_system(rng: np.random.Generator, family: FamilySpec, split: str, size: int = 3,
                adsorbate: Optional[str] = None):
    """Random slab, adsorbate and PES for one benchmark system."""
    metals = ID_METALS if split == "ID" else ID_METALS + OOD_METALS
    a_lo, a_hi = (2.6, 2.9) if split == "ID" else (2.95, 3.2)
    ads_pool = ID_ADSORBATES if split == "ID" else OOD_ADSORBATES
    a = float(rng.uniform(a_lo, a_hi))
    n_top = size * size
    chosen = [int(z) for z in rng.choice(metals, size=family.n_dopants + 1, replace=False)]
    chosen.sort(key=lambda z: SPECIES_DEPTH[z])
    host, dopants = chosen[0], chosen[1:]
    if split == "OOD" and not any(z in OOD_METALS for z in chosen):
        dopants[-1] = int(rng.choice(OOD_METALS))
        if SPECIES_DEPTH[dopants[-1]] <= SPECIES_DEPTH[host]:
            host, dopants[-1] = dopants[-1], host
    top = [host] * n_top
    if family.latin_sites and len(dopants) <= size:
        perm = rng.permutation(size)
        rows = rng.choice(size, size=len(dopants), replace=False)
        sites = np.array([r * size + perm[r] for r in rows])
    else:
        sites = rng.choice(n_top, size=len(dopants), replace=False)
    for s, z in zip(sites, dopants):
        top[int(s)] = z
    bottom = host
    slab = build_slab(a, size, top, bottom)
    name = str(rng.choice(ads_pool)) if adsorbate is None else adsorbate
    template = ADSORBATES[name]
    wells = design_wells(slab, family, host, ADSORBATE_STRENGTH[name], rng)
    calc = make_calculator(slab, template, wells, family, rng.uniform(0, 2 * np.pi))
    return slab, template, calc


# Named single-system presets: (family, split, seed, adsorbate).
PRESETS = {
    "single_well": ("single_well", "ID", 0, "CO"),
    "single_well_O": ("single_well", "ID", 0, "O"),
    "three_well": ("three_well", "ID", 0, "CO"),
    "three_well_O": ("three_well", "ID", 0, "O"),
    "multi_well": ("multi_well", "ID", 0, "CO"),
    "multi_well_O": ("multi_well", "ID", 0, "O"),
}


def preset_system(name: str):
    """(slab, template, calculator) of a named preset."""
    if name not in PRESETS:
        raise ContractViolation(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    family, split, seed, ads = PRESETS[name]
    return draw_system(np.random.default_rng([seed, 99]), FAMILIES[family], split, 3, ads)


# -- dense-grid oracle ----------------------------------------------------------------


def orientation_samples(n: int, seed: int = 12345) -> np.ndarray:
    """Deterministic rotation vectors: identity plus seeded random rotations."""
    if n <= 1:
        return np.zeros((1, 3))
    rest = Rotation.random(n - 1, random_state=seed).as_rotvec()
    return np.vstack([np.zeros(3), rest])


def _grid_energies(slab, template, calc: SyntheticSitePES, grid: int, rotvecs, z_com=None, chunk=4096):
    """Energies (grid, grid, n_orient) with the adsorbate COM at fractional grid points."""
    g = np.arange(grid) / grid
    fx, fy = np.meshgrid(g, g, indexing="ij")
    f = np.stack([fx.ravel(), fy.ravel(), np.zeros(fx.size)], axis=1)
    com = to_cartesian(slab.cell, f)
    com[:, 2] = calc.z_surface + calc.h0 if z_com is None else z_com
    base = place_adsorbate(slab, template, np.zeros(3))
    ads = base.adsorbate_mask
    E = np.empty((len(com), len(rotvecs)))
    for o, rv in enumerate(rotvecs):
        off = template.offsets @ rotation_matrix(rv).T
        for a in range(0, len(com), chunk):
            c = com[a:a + chunk]
            x = np.broadcast_to(base.positions, (len(c),) + base.positions.shape).copy()
            x[:, ads] = c[:, None, :] + off[None]
            E[a:a + chunk, o], _ = synthetic_energy_forces(calc, x, base.tags, base.cell)
    return E.reshape(grid, grid, len(rotvecs)), base


def grid_local_minima(values: np.ndarray) -> np.ndarray:
    """Indices (i, j) of periodic 8-neighbour local minima of a 2D array (ties broken by index)."""
    v = values
    is_min = np.ones_like(v, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = np.roll(np.roll(v, -di, axis=0), -dj, axis=1)
            # strict on one side so plateaus yield a single representative
            if (di, dj) > (0, 0):
                is_min &= v <= nb
            else:
                is_min &= v < nb
    return np.argwhere(is_min)


@dataclass
class OracleResult:
    pose: Pose
    energy: float
    site: np.ndarray
    local_minima: list
    system: Optional[AdslabSystem] = None  # relaxed adslab at the global minimum


ORACLE_RELAX = RelaxConfig(fmax=1e-4, max_iterations=2000)


def oracle_minimum(slab: AdslabSystem, template: AdsorbateTemplate, calc: SyntheticSitePES, grid: int = 64,
                   n_orientations: int = 8, relax_config: RelaxConfig = ORACLE_RELAX,
                   dedupe_distance: float = 0.1, e_slab: float = 0.0, e_adsorbate: float = 0.0) -> OracleResult:
    """Brute-force grid x orientation scan; every grid local minimum is refined by relaxation.

    Energies are adsorption energies (``E_total - e_slab - e_adsorbate``).
    """
    slab = slab_only(slab)
    rotvecs = orientation_samples(n_orientations)
    E, base = _grid_energies(slab, template, calc, grid, rotvecs)
    best_o = E.argmin(axis=2)
    Emin = E.min(axis=2)
    minima: list[LocalMinimum] = []
    relaxed: list[AdslabSystem] = []
    for i, j in grid_local_minima(Emin):
        f = np.array([i / grid, j / grid, 0.0])
        com = to_cartesian(slab.cell, f)
        com[2] = calc.z_surface + calc.h0
        start = place_adsorbate(slab, template, com, rotvecs[best_o[i, j]])
        res = relax(start, calc, relax_config)
        if res.failed:
            continue
        site = adsorbate_site(res.system)
        e = float(res.energy) - e_slab - e_adsorbate
        if any(in_plane_distance(slab.cell, site, m.site) < dedupe_distance for m in minima):
            k = next(k for k, m in enumerate(minima) if in_plane_distance(slab.cell, site, m.site) < dedupe_distance)
            if e < minima[k].energy:
                minima[k] = LocalMinimum(_pose_of(res.system, template), e, site)
                relaxed[k] = res.system
            continue
        minima.append(LocalMinimum(_pose_of(res.system, template), e, site))
        relaxed.append(res.system)
    if not minima:
        raise OracleViolation("grid scan produced no relaxable minimum")
    order = sorted(range(len(minima)), key=lambda k: minima[k].energy)
    minima = [minima[k] for k in order]
    best = minima[0]
    return OracleResult(best.pose, best.energy, best.site, minima, relaxed[order[0]])


def _pose_of(system: AdslabSystem, template: AdsorbateTemplate) -> Pose:
    com = center_of_mass(system)
    f = wrap_fractional(to_fractional(system.cell, com)[:2])
    return Pose(f, adsorbate_orientation(system, template))


# -- benchmark generation -------------------------------------------------------------


def relax_placements(slab, template, calc, n: int, rng, gap: float = 2.0, relax_config: Optional[RelaxConfig] = None):
    """K random placements relaxed to local minima; returns (relaxed systems, total energies, failures)."""
    systems, energies, failures = [], [], 0
    for _ in range(n):
        start = init_placement(slab, template, rng, gap)
        res = relax(start, calc, relax_config)
        if res.failed or not res.converged:
            failures += 1
            continue
        systems.append(res.system)
        energies.append(res.energy)
    return systems, np.array(energies), failures


def generate_system(cfg: BenchmarkConfig, index: int) -> BenchmarkSystem:
    family = FAMILIES[cfg.family]
    split_code = 0 if cfg.split == "ID" else 1
    for attempt in range(cfg.max_redraws):
        rng = np.random.default_rng([cfg.seed, split_code, index, attempt])
        slab, template, calc = draw_system(rng, family, cfg.split, cfg.surface_size)
        probe = place_adsorbate(slab, template, [0.0, 0.0, calc.z_surface + calc.h0])
        e_slab, e_ads = reference_energies(calc, probe)
        oracle = oracle_minimum(slab, template, calc, cfg.grid, cfg.n_orientations, e_slab=e_slab, e_adsorbate=e_ads)
        if len(oracle.local_minima) < family.min_minima:
            log.info("system %d attempt %d: %d minima < %d, redrawing", index, attempt,
                     len(oracle.local_minima), family.min_minima)
            continue
        systems, energies, failures = relax_placements(slab, template, calc, cfg.n_placements, rng)
        if failures > cfg.n_placements / 2:
            log.warning("system %d attempt %d: %d/%d relaxations failed, redrawing", index, attempt,
                        failures, cfg.n_placements)
            continue
        ads_e = energies - e_slab - e_ads
        if ads_e.min() < oracle.energy - ORACLE_TOLERANCE:
            raise OracleViolation(f"system {index}: placement energy {ads_e.min():.6f} below oracle {oracle.energy:.6f}")
        sid = f"{cfg.split}-{cfg.family}-{index:03d}"
        e_rel = relative_energies(ads_e)
        dataset = [TrainingSample(s, float(r), 1.0, sid) for s, r in zip(systems, e_rel)]
        return BenchmarkSystem(sid, cfg.split, cfg.family, slab, template, calc, e_slab, e_ads,
                               oracle.local_minima, dataset, failures)
    raise OracleViolation(f"system {index}: no acceptable draw in {cfg.max_redraws} attempts")


def generate_benchmark(cfg: BenchmarkConfig) -> list[BenchmarkSystem]:
    return [generate_system(cfg, i) for i in range(cfg.n_systems)]


def training_samples(benchmark: Sequence[BenchmarkSystem]) -> list[TrainingSample]:
    return [s for b in benchmark for s in b.dataset]


def save_benchmark(benchmark: Sequence[BenchmarkSystem], path) -> None:
    with open(path, "w") as fh:
        for b in benchmark:
            fh.write(json.dumps(b.to_dict(), sort_keys=True) + "\n")


def load_benchmark(path) -> list[BenchmarkSystem]:
    with open(path) as fh:
        return [BenchmarkSystem.from_dict(json.loads(line)) for line in fh if line.strip()]


# -- metrics ----------------------------------------------------------------------------


def success_dft_style(predicted_energy: float, reference_energy: float, report: AnomalyReport,
                      margin: float = SUCCESS_MARGIN) -> bool:
    """Anomaly-free and no more than ``margin`` eV above the reference (lower always counts)."""
    return (not report.any) and predicted_energy <= reference_energy + margin


def success_distance(predicted_site, oracle_site, cell: LatticeCell, threshold: float = DISTANCE_THRESHOLD) -> bool:
    return in_plane_distance(cell, predicted_site, oracle_site) < threshold


def site_diversity_axes(sites, cell: LatticeCell) -> np.ndarray:
    """Per-lattice-axis circular standard deviation (Å) of in-plane Cartesian sites."""
    sites = np.asarray(sites, float).reshape(-1, 2)
    if len(sites) < 2:
        raise InsufficientData("site diversity needs at least two sites")
    f = np.linalg.solve(cell.in_plane.T, sites.T).T
    ang = 2 * np.pi * f
    mean_f = np.arctan2(np.sin(ang).mean(axis=0), np.cos(ang).mean(axis=0)) / (2 * np.pi)
    dev = f - mean_f
    dev -= np.round(dev)
    lengths = np.linalg.norm(cell.in_plane, axis=1)
    return np.sqrt((dev**2).mean(axis=0)) * lengths


def site_diversity(sites, cell: LatticeCell) -> float:
    """Mean over the two in-plane axes of the circular standard deviation of the sites (Å)."""
    return float(site_diversity_axes(sites, cell).mean())


# -- protocols -----------------------------------------------------------------------------


class Method:
    DIFFUSION = "diffusion"
    RANDOM = "random_baseline"


@dataclass(frozen=True)
class ProtocolConfig:
    relax: RelaxConfig = RelaxConfig()
    thresholds: AnomalyThresholds = AnomalyThresholds()
    sampler: SamplerConfig = SamplerConfig()
    schedule: NoiseSchedule = NoiseSchedule()
    seed: int = 0
    margin: float = SUCCESS_MARGIN
    oracle_tolerance: float = ORACLE_TOLERANCE
    chunk: int = 64  # diffusion runs per batched model call


@dataclass
class EvalRecord:
    system_id: str
    method: str
    site_index: int
    predicted_energy: float
    anomaly: dict
    success_dft_style: bool
    success_distance: bool
    success_mlff: bool
    site_coords: list  # in-plane Å of the placed (pre-relaxation) COM
    relaxed_site: list
    converged: bool
    relax_iterations: int
    sample_steps: int = 0
    failed: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "EvalRecord":
        return cls(**d)


def _site_rng(seed: int, method: str, system_index: int, site: int) -> np.random.Generator:
    code = 101 if method == Method.RANDOM else 202
    return np.random.default_rng([seed, code, system_index, site])


def place_sites(benchmark: Sequence[BenchmarkSystem], method: str, nsites: int, config: ProtocolConfig, model=None):
    """Initial adslabs per (system, site): random placements or diffusion samples.

    Site ``k`` of system ``i`` always uses the same random stream, so the
    placements for ``nsites = n`` are a prefix of those for any larger n.
    Returns ``{(i, k): (system, steps_used)}``.
    """
    if nsites < 1:
        raise ContractViolation("nsites must be >= 1")
    jobs = [(i, k) for i in range(len(benchmark)) for k in range(nsites)]
    out = {}
    gap = config.sampler.interstitial_gap
    if method == Method.RANDOM:
        for i, k in jobs:
            b = benchmark[i]
            out[(i, k)] = (init_placement(b.slab, b.template, _site_rng(config.seed, method, i, k), gap), 0)
        return out
    if method != Method.DIFFUSION:
        raise ContractViolation(f"unknown method {method!r}")
    if model is None:
        raise ContractViolation("diffusion protocol needs a trained model")
    for a in range(0, len(jobs), config.chunk):
        part = jobs[a:a + config.chunk]
        res = sample_many([benchmark[i].slab for i, _ in part], None, model, config.sampler, config.schedule,
                          [_site_rng(config.seed, method, i, k) for i, k in part],
                          templates=[benchmark[i].template for i, _ in part], record_trajectory=False)
        for (i, k), r in zip(part, res):
            out[(i, k)] = (r.system, r.n_steps_used)
    return out


def evaluate_placement(b: BenchmarkSystem, placed: AdslabSystem, method: str, site_index: int,
                       config: ProtocolConfig, steps: int = 0) -> EvalRecord:
    site = adsorbate_site(placed)
    res = relax(placed, b.calculator, config.relax)
    if res.failed:
        rep = AnomalyReport(details={"relaxation": "failed"})
        return EvalRecord(b.system_id, method, site_index, float("nan"), rep.to_dict(), False,
                          success_distance(site, b.oracle_site, b.slab.cell), False, site.tolist(),
                          site.tolist(), False, res.n_iterations, steps, failed=True)
    e = b.adsorption_energy(res.energy)
    if e < b.oracle_energy - config.oracle_tolerance:
        raise OracleViolation(f"{b.system_id}: relaxed energy {e:.6f} below oracle {b.oracle_energy:.6f}")
    rep = classify(placed, res.system, config.thresholds)
    return EvalRecord(
        b.system_id, method, site_index, float(e), rep.to_dict(),
        success_dft_style(e, b.oracle_energy, rep, config.margin),
        success_distance(site, b.oracle_site, b.slab.cell),
        bool(e <= b.oracle_energy + config.margin),
        site.tolist(), adsorbate_site(res.system).tolist(), bool(res.converged), res.n_iterations, steps,
    )


def _evaluate_system(args) -> list[EvalRecord]:
    b, placements, method, config = args
    return [evaluate_placement(b, system, method, k, config, steps) for k, (system, steps) in enumerate(placements)]


def run_protocol(benchmark: Sequence[BenchmarkSystem], method: str, nsites: int, config: ProtocolConfig = ProtocolConfig(),
                 model=None, workers: int = 1) -> list[EvalRecord]:
    """Place, relax, screen and score ``nsites`` sites per system; records sorted by system then site.

    Placement runs in this process (diffusion is batched across systems);
    relaxations are spread over ``workers`` processes, one task per system.
    """
    placed = place_sites(benchmark, method, nsites, config, model)
    tasks = [(b, [placed[(i, k)] for k in range(nsites)], method, config) for i, b in enumerate(benchmark)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_system = list(pool.map(_evaluate_system, tasks))
    else:
        per_system = [_evaluate_system(t) for t in tasks]
    return [r for rs in per_system for r in rs]


def _anomalous(r: EvalRecord) -> bool:
    return r.failed or AnomalyReport.from_dict(r.anomaly).any


def aggregate(records: Sequence[EvalRecord], nsites: int) -> dict:
    """Per-system aggregates over the first ``nsites`` sites of each system."""
    if nsites < 1:
        raise ContractViolation("nsites must be >= 1")
    by_sys: dict[str, list] = {}
    for r in records:
        if r.site_index < nsites:
            by_sys.setdefault(r.system_id, []).append(r)
    if not by_sys:
        raise InsufficientData("no records to aggregate")
    for sid, rs in by_sys.items():
        if len(rs) < nsites:
            raise InsufficientData(f"{sid}: {len(rs)} sites recorded, {nsites} requested")
    n = len(by_sys)
    succ = sum(any(r.success_dft_style for r in rs) for rs in by_sys.values())
    dist = sum(any(r.success_distance for r in rs) for rs in by_sys.values())
    mlff = sum(any(r.success_mlff for r in rs) for rs in by_sys.values())
    anom = sum(all(_anomalous(r) for r in rs) for rs in by_sys.values())
    return {
        "nsites": nsites,
        "n_systems": n,
        "success_rate": succ / n,
        "distance_success_rate": dist / n,
        "mlff_success_rate": mlff / n,
        "anomaly_rate": anom / n,
    }


def diversity_by_system(records: Sequence[EvalRecord], benchmark: Sequence[BenchmarkSystem], nsites: int) -> dict:
    cells = {b.system_id: b.slab.cell for b in benchmark}
    sites: dict[str, list] = {}
    for r in records:
        if r.site_index < nsites:
            sites.setdefault(r.system_id, []).append(r.site_coords)
    return {sid: site_diversity(s, cells[sid]) for sid, s in sites.items()}


def save_records(records: Sequence[EvalRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_records(path) -> list[EvalRecord]:
    with open(path) as fh:
        return [EvalRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def series_table(summary_rows: Sequence[dict]) -> str:
    """Tab-separated success/anomaly rates per (method, nsites), ready for plotting."""
    lines = ["method\tnsites\tsuccess_rate\tanomaly_rate\tdistance_success_rate\tmlff_success_rate"]
    for row in summary_rows:
        lines.append(f"{row['method']}\t{row['nsites']}\t{row['success_rate']:.6f}\t{row['anomaly_rate']:.6f}\t"
                     f"{row['distance_success_rate']:.6f}\t{row['mlff_success_rate']:.6f}")
    return "\n".join(lines) + "\n"

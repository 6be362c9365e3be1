"""Screening of relaxed adslabs for desorption, dissociation, reconstruction and intercalation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from ase.data import covalent_radii
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ContractViolation, UnknownSpecies
from .lattice import AdslabSystem, Tag, minimum_image, pairwise_min_image_distances


@dataclass(frozen=True)
class AnomalyThresholds:
    """Screening thresholds in Å; engineering defaults, all configurable."""

    desorption: float = 3.5
    reconstruction: float = 1.0
    intercalation: float = 0.5
    bond_scale: float = 1.2


@dataclass
class AnomalyReport:
    desorption: bool = False
    dissociation: bool = False
    reconstruction: bool = False
    intercalation: bool = False
    details: dict = field(default_factory=dict)

    @property
    def any(self) -> bool:
        return self.desorption or self.dissociation or self.reconstruction or self.intercalation

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "AnomalyReport":
        return cls(**d)


def covalent_radius(z: int) -> float:
    z = int(z)
    if z < 1 or z >= len(covalent_radii) or not np.isfinite(covalent_radii[z]):
        raise UnknownSpecies(f"no covalent radius for Z={z}")
    return float(covalent_radii[z])


def connectivity_graph(system: AdslabSystem, role=Tag.ADSORBATE, bond_scale: float = 1.2) -> np.ndarray:
    """Boolean adjacency over atoms with tag ``role`` (minimum-image bonding criterion)."""
    idx = np.nonzero(system.tags == int(role))[0]
    radii = np.array([covalent_radius(z) for z in system.species[idx]])
    pos = system.positions[idx]
    d = pairwise_min_image_distances(system.cell, pos, pos)
    adj = d <= bond_scale * (radii[:, None] + radii[None, :])
    np.fill_diagonal(adj, False)
    return adj


def n_components(adj: np.ndarray) -> int:
    if len(adj) == 0:
        return 0
    n, _ = connected_components(csr_matrix(adj), directed=False)
    return int(n)


def top_layer_z(system: AdslabSystem, tol: float = 0.5) -> float:
    """Mean z of slab atoms within ``tol`` Å of the highest slab atom."""
    z = system.positions[system.slab_mask, 2]
    return float(z[z >= z.max() - tol].mean())


def classify(initial: AdslabSystem, relaxed: AdslabSystem, thresholds: AnomalyThresholds | None = None) -> AnomalyReport:
    th = thresholds or AnomalyThresholds()
    if len(initial) != len(relaxed) or not np.array_equal(initial.tags, relaxed.tags):
        raise ContractViolation("initial and relaxed structures do not correspond atom by atom")
    relaxed.require_adslab()
    rep = AnomalyReport()
    ads = relaxed.adsorbate_mask
    slab = relaxed.slab_mask

    d_as = pairwise_min_image_distances(relaxed.cell, relaxed.positions[ads], relaxed.positions[slab])
    min_d = float(d_as.min())
    rep.details["min_adsorbate_slab_distance"] = min_d
    rep.desorption = min_d > th.desorption

    n0 = n_components(connectivity_graph(initial, Tag.ADSORBATE, th.bond_scale))
    n1 = n_components(connectivity_graph(relaxed, Tag.ADSORBATE, th.bond_scale))
    rep.details["adsorbate_components"] = [n0, n1]
    rep.dissociation = n1 > n0

    free = relaxed.tags == Tag.FREE_SLAB
    if free.any():
        disp = minimum_image(relaxed.cell, relaxed.positions[free] - initial.positions[free])
        max_disp = float(np.linalg.norm(disp, axis=1).max())
    else:
        max_disp = 0.0
    rep.details["max_free_slab_displacement"] = max_disp
    rep.reconstruction = max_disp > th.reconstruction

    z_top = top_layer_z(relaxed)
    z_low = float(relaxed.positions[ads, 2].min())
    rep.details["lowest_adsorbate_depth"] = z_top - z_low
    rep.intercalation = z_low < z_top - th.intercalation
    return rep

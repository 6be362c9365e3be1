"""Periodic slab cells, adslab systems and rigid adsorbate poses.

Conventions
-----------
* Rows of ``LatticeCell.basis`` are lattice vectors (``a``, ``b``, ``c``) in Å.
* Cartesian from fractional: ``x = f @ basis``.
* Slabs are periodic along ``a`` and ``b`` and aperiodic along ``c``, which is
  aligned with the global z axis (the surface normal).
* Adsorbate rotations are parameterised externally by Euler (axis-angle)
  vectors and applied internally as rotation matrices.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    ContractViolation,
    EmptySelection,
    InvalidCoordinate,
    SingularCell,
)

SLAB_PBC = (True, True, False)


class Tag(enum.IntEnum):
    """Atom roles; integer values follow the usual 0/1/2 slab-adsorbate tagging."""

    FIXED_SLAB = 0
    FREE_SLAB = 1
    ADSORBATE = 2


SLAB_TAGS = (Tag.FIXED_SLAB, Tag.FREE_SLAB)


@dataclass(frozen=True)
class LatticeCell:
    basis: np.ndarray
    pbc: tuple[bool, bool, bool] = SLAB_PBC

    def __post_init__(self):
        basis = np.array(self.basis, dtype=float).reshape(3, 3)
        basis.setflags(write=False)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "pbc", tuple(bool(p) for p in self.pbc))
        if abs(np.linalg.det(basis)) <= 1e-10:
            raise SingularCell(f"cell determinant {np.linalg.det(basis):.3e} is ~0")

    @classmethod
    def slab(cls, a, b, c=20.0):
        """Slab cell from two in-plane 2-vectors (or 3-vectors with z=0) and a height.

        Scalar ``a`` and ``b`` give a rectangular cell.
        """
        if np.ndim(a) == 0 and np.ndim(b) == 0:
            a, b = [float(a), 0.0], [0.0, float(b)]
        a = np.pad(np.asarray(a, float), (0, 3 - len(a)))
        b = np.pad(np.asarray(b, float), (0, 3 - len(b)))
        return cls(np.array([a, b, [0.0, 0.0, float(c)]]), SLAB_PBC)

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.basis)

    @property
    def in_plane(self) -> np.ndarray:
        """2x2 block of the in-plane lattice vectors (x, y components)."""
        return self.basis[:2, :2]

    @property
    def area(self) -> float:
        return float(abs(np.linalg.det(self.in_plane)))

    def is_normal_aligned(self, tol=1e-8) -> bool:
        c = self.basis[2]
        return bool(np.all(np.abs(c[:2]) < tol * np.linalg.norm(c)))

    def to_dict(self) -> dict:
        return {"basis": self.basis.tolist(), "pbc": list(self.pbc)}

    @classmethod
    def from_dict(cls, d) -> "LatticeCell":
        return cls(np.array(d["basis"], float), tuple(d.get("pbc", SLAB_PBC)))


@dataclass
class AdslabSystem:
    """Atoms of a slab plus (optionally) an adsorbate inside a periodic cell.

    The constructor validates array shapes and species. The requirement of at
    least one slab atom and one adsorbate atom is checked by
    :meth:`require_adslab` at the operations that need it, so slab-only
    structures can be represented and read from disk.
    """

    positions: np.ndarray
    species: np.ndarray
    tags: np.ndarray
    cell: LatticeCell

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float).reshape(-1, 3)
        self.species = np.array(self.species, dtype=int).reshape(-1)
        self.tags = np.array(self.tags, dtype=int).reshape(-1)
        n = len(self.positions)
        if len(self.species) != n or len(self.tags) != n:
            raise ContractViolation(
                f"positions/species/tags lengths differ: {n}, {len(self.species)}, {len(self.tags)}"
            )
        if n and (self.species.min() < 1 or self.species.max() > 118):
            raise ContractViolation("species must be atomic numbers in 1..118")
        if n and not np.isin(self.tags, [t.value for t in Tag]).all():
            raise ContractViolation(f"unknown tag values {sorted(set(self.tags) - {0, 1, 2})}")
        if not np.all(np.isfinite(self.positions)):
            raise InvalidCoordinate("non-finite atomic positions")

    def __len__(self):
        return len(self.positions)

    @property
    def adsorbate_mask(self) -> np.ndarray:
        return self.tags == Tag.ADSORBATE

    @property
    def slab_mask(self) -> np.ndarray:
        return self.tags != Tag.ADSORBATE

    @property
    def free_mask(self) -> np.ndarray:
        return self.tags != Tag.FIXED_SLAB

    def require_adslab(self) -> "AdslabSystem":
        if not self.adsorbate_mask.any():
            raise ContractViolation("system has no ADSORBATE atoms")
        if not self.slab_mask.any():
            raise ContractViolation("system has no slab atoms")
        return self

    def with_positions(self, positions) -> "AdslabSystem":
        return replace(self, positions=np.array(positions, dtype=float))

    def copy(self) -> "AdslabSystem":
        return replace(self, positions=self.positions.copy())

    def subset(self, mask) -> "AdslabSystem":
        mask = np.asarray(mask)
        return AdslabSystem(self.positions[mask], self.species[mask], self.tags[mask], self.cell)

    def to_dict(self) -> dict:
        return {
            "positions": self.positions.tolist(),
            "species": self.species.tolist(),
            "tags": self.tags.tolist(),
            "cell": self.cell.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "AdslabSystem":
        return cls(d["positions"], d["species"], d["tags"], LatticeCell.from_dict(d["cell"]))


def _canonical_rotvec(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    angle = np.linalg.norm(v)
    if angle <= np.pi:
        return v.copy()
    # Reduce to the equivalent rotation with angle in [0, pi].
    return Rotation.from_rotvec(v).as_rotvec()


@dataclass(frozen=True)
class Pose:
    """In-plane fractional translation plus an Euler (axis-angle) rotation vector."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, float).reshape(2))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, float).reshape(3))

    def canonical(self) -> "Pose":
        """Wrapped translation and rotation angle reduced into [0, pi]."""
        return Pose(wrap_fractional(self.translation), _canonical_rotvec(self.rotation))

    def to_dict(self) -> dict:
        return {"translation": self.translation.tolist(), "rotation": self.rotation.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Pose":
        return cls(d["translation"], d["rotation"])


# -- coordinate transforms ---------------------------------------------------


def to_fractional(cell: LatticeCell, x) -> np.ndarray:
    """Cartesian (..., 3) -> fractional (..., 3) such that ``f @ basis == x``."""
    x = np.asarray(x, dtype=float)
    # Solve rather than multiply by the inverse for accuracy on skewed cells.
    return np.linalg.solve(cell.basis.T, x.reshape(-1, 3).T).T.reshape(x.shape)


def to_cartesian(cell: LatticeCell, f) -> np.ndarray:
    return np.asarray(f, dtype=float) @ cell.basis


def wrap_fractional(f) -> np.ndarray:
    """Wrap fractional coordinates into [0, 1) componentwise."""
    f = np.asarray(f, dtype=float)
    if np.isnan(f).any():
        raise InvalidCoordinate("NaN fractional coordinate")
    if not np.isfinite(f).all():
        raise InvalidCoordinate("infinite fractional coordinate")
    w = f - np.floor(f)
    # f - floor(f) can round up to exactly 1.0 for tiny negative inputs.
    return np.where(w >= 1.0, 0.0, w)


def _image_shifts(cell: LatticeCell, reach: int = 1) -> np.ndarray:
    ranges = [range(-reach, reach + 1) if p else range(1) for p in cell.pbc]
    return np.array([(i, j, k) for i in ranges[0] for j in ranges[1] for k in ranges[2]], float)


def minimum_image(cell: LatticeCell, dx) -> np.ndarray:
    """Shortest periodic image of displacement(s) ``dx`` (..., 3).

    Only periodic axes are wrapped; for slabs the normal component is left as is.
    """
    dx = np.asarray(dx, dtype=float)
    flat = dx.reshape(-1, 3)
    f = to_fractional(cell, flat)
    periodic = np.array(cell.pbc)
    base = np.where(periodic, -np.round(f), 0.0)
    # Rounding in fractional space is not always shortest for skewed cells;
    # check the neighbouring images explicitly. Shifts are added to dx itself
    # so components along non-periodic axes stay exact.
    shifts = base[:, None, :] + _image_shifts(cell, 1)[None, :, :]
    cands = flat[:, None, :] + shifts @ cell.basis
    best = np.argmin(np.einsum("nsk,nsk->ns", cands, cands), axis=1)
    out = cands[np.arange(len(flat)), best]
    return out.reshape(dx.shape)


# -- rotations ---------------------------------------------------------------


def rotation_matrix(rotvec) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(rotvec, float).reshape(3)).as_matrix()


def rotation_vector(matrix) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(matrix, float)).as_rotvec()


def random_rotation_vector(rng: np.random.Generator) -> np.ndarray:
    """Axis uniform on the sphere, angle uniform on [0, pi]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, np.pi)


# -- adsorbate operations ----------------------------------------------------


def _tag_mask(sys: AdslabSystem, role) -> np.ndarray:
    if isinstance(role, (int, Tag)):
        return sys.tags == int(role)
    return np.isin(sys.tags, [int(r) for r in role])


def center_of_mass(sys: AdslabSystem, role=Tag.ADSORBATE) -> np.ndarray:
    """Unweighted mean position of atoms with the given tag(s).

    Adsorbate atoms are first made whole by minimum image relative to the
    first one, so a molecule split across the boundary is handled.
    """
    mask = _tag_mask(sys, role)
    if not mask.any():
        raise EmptySelection(f"no atoms with tag(s) {role!r}")
    if role == Tag.ADSORBATE:
        return whole_adsorbate(sys).mean(axis=0)
    return sys.positions[mask].mean(axis=0)


def whole_adsorbate(sys: AdslabSystem) -> np.ndarray:
    """Adsorbate positions with every atom taken as the minimum image of the first one.

    Assumes the adsorbate spans less than half the in-plane cell.
    """
    pos = sys.positions[sys.adsorbate_mask]
    if len(pos) < 2:
        return pos.copy()
    return pos[0] + minimum_image(sys.cell, pos - pos[0])


def in_plane_cartesian(cell: LatticeCell, translation) -> np.ndarray:
    """Cartesian displacement of an in-plane fractional translation (z set to 0)."""
    t = np.asarray(translation, float)
    d = t[..., 0, None] * cell.basis[0] + t[..., 1, None] * cell.basis[1]
    d[..., 2] = 0.0
    return d


def in_plane_fractional(cell: LatticeCell, dxy) -> np.ndarray:
    """Inverse of :func:`in_plane_cartesian` for Cartesian (x, y) displacements."""
    dxy = np.asarray(dxy, float)
    return np.linalg.solve(cell.in_plane.T, dxy.reshape(-1, 2).T).T.reshape(dxy.shape)


def wrap_adsorbate(sys: AdslabSystem) -> AdslabSystem:
    """Shift the adsorbate rigidly so its in-plane COM lies inside the cell."""
    mask = sys.adsorbate_mask
    com = sys.positions[mask].mean(axis=0)
    f = to_fractional(sys.cell, com)
    shift = np.floor(f[:2])
    shift = np.where(f[:2] - shift >= 1.0, shift + 1, shift)
    if not shift.any():
        return sys
    pos = sys.positions.copy()
    pos[mask] -= shift[0] * sys.cell.basis[0] + shift[1] * sys.cell.basis[1]
    return sys.with_positions(pos)


def apply_rigid_pose(sys: AdslabSystem, pose_delta: Pose) -> AdslabSystem:
    """Rotate the adsorbate about its COM, then translate it in-plane.

    Slab atoms are untouched. The adsorbate COM is wrapped back into the cell
    afterwards; individual atoms keep their rigid offsets from the COM and may
    protrude across the periodic boundary.
    """
    sys.require_adslab()
    mask = sys.adsorbate_mask
    pos = sys.positions.copy()
    ads = pos[mask]
    com = ads.mean(axis=0)
    R = rotation_matrix(pose_delta.rotation)
    ads = (ads - com) @ R.T + com
    ads = ads + in_plane_cartesian(sys.cell, pose_delta.translation)
    pos[mask] = ads
    return wrap_adsorbate(sys.with_positions(pos))


@dataclass(frozen=True)
class AdsorbateTemplate:
    """Gas-phase adsorbate geometry, stored relative to its COM."""

    name: str
    species: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        offsets = np.asarray(self.offsets, float).reshape(-1, 3)
        mean = offsets.mean(axis=0)
        # skip already-centred input so that serialisation round trips are exact
        if np.abs(mean).max() > 1e-12:
            offsets = offsets - mean
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "species", np.asarray(self.species, int).reshape(-1))

    def __len__(self):
        return len(self.species)

    def to_dict(self) -> dict:
        return {"name": self.name, "species": self.species.tolist(), "offsets": self.offsets.tolist()}

    @classmethod
    def from_dict(cls, d) -> "AdsorbateTemplate":
        return cls(d["name"], d["species"], d["offsets"])


def place_adsorbate(slab: AdslabSystem, template: AdsorbateTemplate, com, rotvec=None) -> AdslabSystem:
    """Build an adslab by putting ``template`` at Cartesian ``com`` with an optional rotation."""
    offsets = template.offsets
    if rotvec is not None:
        offsets = offsets @ rotation_matrix(rotvec).T
    keep = slab.slab_mask
    pos = np.vstack([slab.positions[keep], np.asarray(com, float) + offsets])
    species = np.concatenate([slab.species[keep], template.species])
    tags = np.concatenate([slab.tags[keep], np.full(len(template), int(Tag.ADSORBATE))])
    return AdslabSystem(pos, species, tags, slab.cell)


def adsorbate_orientation(sys: AdslabSystem, template: AdsorbateTemplate) -> np.ndarray:
    """Rotation vector best aligning ``template`` onto the system's adsorbate (Kabsch).

    For linear adsorbates the spin about the molecular axis is arbitrary.
    """
    ads = whole_adsorbate(sys)
    ads = ads - ads.mean(axis=0)
    if len(ads) < 2:
        return np.zeros(3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        rot, _ = Rotation.align_vectors(ads, template.offsets)
    return rot.as_rotvec()


def adsorbate_site(sys: AdslabSystem) -> np.ndarray:
    """In-plane Cartesian (x, y) of the adsorbate COM, wrapped into the cell."""
    com = center_of_mass(sys, Tag.ADSORBATE)
    f = to_fractional(sys.cell, com)
    f[:2] = wrap_fractional(f[:2])
    return to_cartesian(sys.cell, f)[:2]


def pairwise_min_image_distances(cell: LatticeCell, a, b) -> np.ndarray:
    """Matrix of minimum-image distances between point sets ``a`` (n,3) and ``b`` (m,3)."""
    a = np.asarray(a, float).reshape(-1, 3)
    b = np.asarray(b, float).reshape(-1, 3)
    d = minimum_image(cell, b[None, :, :] - a[:, None, :])
    return np.linalg.norm(d, axis=-1)


def in_plane_distance(cell: LatticeCell, p, q) -> float:
    """Minimum-image in-plane distance between two in-plane Cartesian sites."""
    d = np.zeros(3)
    d[:2] = np.asarray(q, float)[:2] - np.asarray(p, float)[:2]
    return float(np.linalg.norm(minimum_image(cell, d)[:2]))


def stack_positions(systems: Sequence[AdslabSystem]) -> np.ndarray:
    return np.stack([s.positions for s in systems])


def species_set(systems: Iterable[AdslabSystem]) -> list[int]:
    out: set[int] = set()
    for s in systems:
        out.update(int(z) for z in s.species)
    return sorted(out)


def shift_reach(cell: LatticeCell, cutoff: float) -> list[int]:
    """Image range per axis needed to cover ``cutoff`` for wrapped positions."""
    inv = cell.inverse
    out = []
    for i, periodic in enumerate(cell.pbc):
        if not periodic:
            out.append(0)
            continue
        spacing = 1.0 / np.linalg.norm(inv[:, i])
        out.append(int(np.ceil(cutoff / spacing)))
    return out


def periodic_neighbors(cell: LatticeCell, positions, cutoff: float, receivers=None):
    """All (i, j, shift) with ``|x_j + shift @ basis - x_i| <= cutoff``.

    ``shift`` is an integer lattice translation expressed relative to the
    original (unwrapped) positions. Self pairs with zero shift are excluded.
    Returns ``(i, j, shift, vec, dist)`` with ``vec = x_j + shift @ basis - x_i``.
    """
    x = np.asarray(positions, float).reshape(-1, 3)
    n = len(x)
    recv = np.arange(n) if receivers is None else np.asarray(receivers, int)
    f = to_fractional(cell, x)
    periodic = np.array(cell.pbc)
    off = np.where(periodic, np.floor(f), 0.0)
    xw = (f - off) @ cell.basis
    reach = shift_reach(cell, cutoff)
    axes = [np.arange(-r, r + 1) for r in reach]
    shifts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3).astype(float)
    svec = shifts @ cell.basis
    vec = xw[None, :, None, :] + svec[None, None, :, :] - xw[recv][:, None, None, :]
    d2 = np.einsum("ijsk,ijsk->ijs", vec, vec)
    mask = d2 <= cutoff * cutoff
    zero = np.all(shifts == 0, axis=1)
    self_pair = recv[:, None] == np.arange(n)[None, :]
    mask &= ~(self_pair[:, :, None] & zero[None, None, :])
    ii, jj, ss = np.nonzero(mask)
    i = recv[ii]
    shift = shifts[ss] - off[jj] + off[i]
    v = vec[ii, jj, ss]
    return i, jj, shift.astype(int), v, np.sqrt(d2[ii, jj, ss])

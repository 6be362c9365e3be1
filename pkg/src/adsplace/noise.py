"""Noise schedules, forward perturbation of adsorbate poses, DSM targets and loss."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import igso3
from .errors import ContractViolation, MissingCondition
from .lattice import AdslabSystem, Pose, apply_rigid_pose, in_plane_fractional


class Channel(str, enum.Enum):
    TRANSLATION = "translation"
    ROTATION = "rotation"


class ConditionMode(str, enum.Enum):
    UNCONDITIONAL = "unconditional"
    CONDITIONAL = "conditional"


@dataclass(frozen=True)
class NoiseSchedule:
    tr_sigma_min: float = 0.1
    tr_sigma_max: float = 10.0
    rot_sigma_min: float = 0.01
    rot_sigma_max: float = 1.55

    def __post_init__(self):
        if not (0 < self.tr_sigma_min < self.tr_sigma_max):
            raise ContractViolation("need 0 < tr_sigma_min < tr_sigma_max")
        if not (0 < self.rot_sigma_min < self.rot_sigma_max):
            raise ContractViolation("need 0 < rot_sigma_min < rot_sigma_max")

    def bounds(self, channel) -> tuple[float, float]:
        if Channel(channel) is Channel.TRANSLATION:
            return self.tr_sigma_min, self.tr_sigma_max
        return self.rot_sigma_min, self.rot_sigma_max


def sigma_at(schedule: NoiseSchedule, t, channel) -> np.ndarray | float:
    """Geometric interpolation ``sigma_min**(1-t) * sigma_max**t``; t is clamped to [0, 1]."""
    t_arr = np.asarray(t, float)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        warnings.warn("sigma_at: t clamped into [0, 1]", RuntimeWarning, stacklevel=2)
        t_arr = np.clip(t_arr, 0.0, 1.0)
    lo, hi = schedule.bounds(channel)
    out = lo ** (1 - t_arr) * hi**t_arr
    return float(out) if out.ndim == 0 else out


def g_squared(schedule: NoiseSchedule, t, channel):
    """Diffusion coefficient d sigma^2 / dt for the geometric schedule."""
    lo, hi = schedule.bounds(channel)
    return 2 * np.asarray(sigma_at(schedule, t, channel)) ** 2 * np.log(hi / lo)


@dataclass
class TrainingSample:
    """A relaxed adslab (the denoising target) and its relative energy in eV."""

    system: AdslabSystem
    relative_energy: Optional[float] = None
    weight: float = 1.0
    system_id: str = ""

    def __post_init__(self):
        self.system.require_adslab()
        if self.relative_energy is not None and self.relative_energy > 1e-9:
            raise ContractViolation(f"relative energy must be <= 0, got {self.relative_energy}")

    def to_dict(self) -> dict:
        return {
            "system": self.system.to_dict(),
            "relative_energy": self.relative_energy,
            "weight": self.weight,
            "system_id": self.system_id,
        }

    @classmethod
    def from_dict(cls, d) -> "TrainingSample":
        return cls(AdslabSystem.from_dict(d["system"]), d.get("relative_energy"), d.get("weight", 1.0), d.get("system_id", ""))


@dataclass
class ScoreTarget:
    """Score targets for one sample (or a batch when fields carry a leading axis)."""

    tr_score: np.ndarray
    rot_score: np.ndarray
    tr_sigma: np.ndarray | float
    rot_sigma: np.ndarray | float
    t: np.ndarray | float = 0.0

    def __post_init__(self):
        self.tr_score = np.asarray(self.tr_score, float)
        self.rot_score = np.asarray(self.rot_score, float)
        if not (np.isfinite(self.tr_score).all() and np.isfinite(self.rot_score).all()):
            raise ContractViolation("non-finite score target")


def stack_targets(targets: Sequence[ScoreTarget]) -> ScoreTarget:
    return ScoreTarget(
        np.stack([t.tr_score for t in targets]),
        np.stack([t.rot_score for t in targets]),
        np.array([t.tr_sigma for t in targets], float),
        np.array([t.rot_sigma for t in targets], float),
        np.array([t.t for t in targets], float),
    )


def perturb_with(sample_system: AdslabSystem, dr_xy, drot, tr_sigma, rot_sigma, table, t=0.0):
    """Apply a known in-plane Cartesian shift and rotation; return system and targets."""
    dr_xy = np.asarray(dr_xy, float).reshape(2)
    drot = np.asarray(drot, float).reshape(3)
    pose = Pose(in_plane_fractional(sample_system.cell, dr_xy), drot)
    perturbed = apply_rigid_pose(sample_system, pose)
    target = ScoreTarget(
        tr_score=-dr_xy / tr_sigma**2,
        rot_score=igso3.rotation_score(table, drot, rot_sigma),
        tr_sigma=float(tr_sigma),
        rot_sigma=float(rot_sigma),
        t=float(t),
    )
    return perturbed, target


def forward_perturb(sample: TrainingSample, t, schedule: NoiseSchedule, table, rng: np.random.Generator):
    """Draw translation and rotation noise at time ``t`` and perturb the sample.

    The translation noise is Gaussian in Cartesian in-plane coordinates with
    target ``-dr / sigma^2``; the rotation noise is IGSO(3) with target equal
    to the IGSO(3) score evaluated at the applied rotation.
    """
    tr_sigma = sigma_at(schedule, t, Channel.TRANSLATION)
    rot_sigma = sigma_at(schedule, t, Channel.ROTATION)
    dr = rng.normal(0.0, tr_sigma, size=2)
    drot = igso3.sample_rotation(table, rot_sigma, rng)
    return perturb_with(sample.system, dr, drot, tr_sigma, rot_sigma, table, t)


def rot_loss_weight(table, rot_sigma) -> np.ndarray:
    """1 / E[|rot score|^2] at ``rot_sigma`` (variance normalisation)."""
    return 1.0 / np.asarray(table.score_norm_sq_at(rot_sigma))


def dsm_loss(pred_tr, pred_rot, target: ScoreTarget, table) -> float:
    """Batch-mean denoising score matching loss.

    ``sigma_tr^2 |pred_tr - target_tr|^2 + lambda_rot(sigma_rot) |pred_rot - target_rot|^2``
    with ``lambda_rot = 1 / E[|rot score|^2]``.
    """
    pred_tr = np.asarray(pred_tr, float)
    pred_rot = np.asarray(pred_rot, float)
    if pred_tr.shape != target.tr_score.shape or pred_rot.shape != target.rot_score.shape:
        raise ContractViolation(
            f"prediction shapes {pred_tr.shape}/{pred_rot.shape} do not match targets "
            f"{target.tr_score.shape}/{target.rot_score.shape}"
        )
    tr_sigma = np.asarray(target.tr_sigma, float)
    lam = rot_loss_weight(table, target.rot_sigma)
    tr_term = tr_sigma**2 * np.sum((pred_tr - target.tr_score) ** 2, axis=-1)
    rot_term = lam * np.sum((pred_rot - target.rot_score) ** 2, axis=-1)
    return float(np.mean(tr_term + rot_term))


def condition_value(sample: TrainingSample, mode) -> Optional[float]:
    """Conditioning input for the score model: ``None`` or E_rel in eV."""
    if ConditionMode(mode) is ConditionMode.UNCONDITIONAL:
        return None
    if sample.relative_energy is None:
        raise MissingCondition(f"sample {sample.system_id!r} has no relative energy")
    return float(sample.relative_energy)


def relative_energies(energies) -> np.ndarray:
    """E_rel = E_min - E_i for each placement of one system."""
    e = np.asarray(energies, float)
    return e.min() - e


def select_training_samples(samples: Sequence[TrainingSample], mode) -> list[TrainingSample]:
    """All placements for conditional training; one E_rel = 0 sample per system otherwise."""
    if ConditionMode(mode) is ConditionMode.CONDITIONAL:
        for s in samples:
            if s.relative_energy is None:
                raise MissingCondition(f"sample {s.system_id!r} has no relative energy")
        return list(samples)
    chosen: dict[str, TrainingSample] = {}
    for s in samples:
        if s.relative_energy is not None and abs(s.relative_energy) <= 1e-12 and s.system_id not in chosen:
            chosen[s.system_id] = s
    return list(chosen.values())

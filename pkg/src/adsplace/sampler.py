"""Reverse diffusion over adsorbate poses: probability-flow ODE or geodesic random walk."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import igso3
from .errors import ContractViolation, NonFiniteScore
from .lattice import (
    AdslabSystem,
    AdsorbateTemplate,
    Pose,
    adsorbate_orientation,
    apply_rigid_pose,
    center_of_mass,
    in_plane_fractional,
    minimum_image,
    place_adsorbate,
    random_rotation_vector,
    rotation_matrix,
    to_cartesian,
)
from .noise import Channel, NoiseSchedule, g_squared, sigma_at
from .score_net import ScoreModel, ScoreModelInput, ScoreModelOutput

log = logging.getLogger(__name__)


class SamplerMode(str, enum.Enum):
    ODE = "ODE"
    SDE = "SDE"


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 100
    mode: str = SamplerMode.ODE.value
    tr_tol: float = 1e-3  # Å per step
    rot_tol: float = 1e-4  # rad per step
    interstitial_gap: float = 2.0
    # Relative energy fed to conditional models at inference (the target minimum).
    condition: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ContractViolation("n_steps must be >= 1")
        if not (self.tr_tol > 0 and self.rot_tol > 0):
            raise ContractViolation("early-stop tolerances must be positive")
        SamplerMode(self.mode)


def slab_only(system: AdslabSystem) -> AdslabSystem:
    return system.subset(system.slab_mask)


def init_placement(slab: AdslabSystem, template: AdsorbateTemplate, rng: np.random.Generator,
                   gap: float = 2.0) -> AdslabSystem:
    """Random in-plane COM, random orientation, lowest adsorbate atom ``gap`` Å above the top slab atom."""
    slab = slab_only(slab)
    if len(slab) == 0:
        raise ContractViolation("slab has no atoms")
    f = rng.uniform(0.0, 1.0, size=2)
    rotvec = random_rotation_vector(rng)
    offsets = template.offsets @ rotation_matrix(rotvec).T
    com = to_cartesian(slab.cell, np.array([f[0], f[1], 0.0]))
    com[2] = slab.positions[:, 2].max() + gap - offsets[:, 2].min()
    return place_adsorbate(slab, template, com, rotvec)


@dataclass
class StepInfo:
    step: int
    t: float
    tr_step: float
    rot_step: float
    com: np.ndarray
    orientation: np.ndarray

    def to_dict(self) -> dict:
        return {"step": self.step, "t": self.t, "tr_step": self.tr_step, "rot_step": self.rot_step,
                "com": self.com.tolist(), "orientation": self.orientation.tolist()}


def pose_increment(score_tr, score_rot, t: float, dt: float, schedule: NoiseSchedule, mode, rng):
    """Cartesian in-plane translation and rotation-vector increments for one reverse step."""
    g2_tr = float(g_squared(schedule, t, Channel.TRANSLATION))
    g2_rot = float(g_squared(schedule, t, Channel.ROTATION))
    score_tr = np.asarray(score_tr, float)
    score_rot = np.asarray(score_rot, float)
    if SamplerMode(mode) is SamplerMode.ODE:
        return 0.5 * g2_tr * score_tr * dt, 0.5 * g2_rot * score_rot * dt
    d_tr = g2_tr * score_tr * dt + np.sqrt(g2_tr * dt) * rng.normal(size=2)
    # Geodesic random walk: Gaussian tangent noise mapped through the exponential map.
    d_rot = g2_rot * score_rot * dt + np.sqrt(g2_rot * dt) * rng.normal(size=3)
    return d_tr, d_rot


def apply_increment(system: AdslabSystem, d_tr, d_rot) -> AdslabSystem:
    pose = Pose(in_plane_fractional(system.cell, np.asarray(d_tr, float)), np.asarray(d_rot, float))
    return apply_rigid_pose(system, pose)


def reverse_step(system, t, dt, model: ScoreModel, schedule, config: SamplerConfig, rng,
                 table: Optional[igso3.IgSo3Table] = None):
    """One reverse step at time ``t``; returns the new system and (translation, rotation) step sizes."""
    del table  # the model carries the rotation-score scale itself
    out = reverse_steps([system], [t], dt, model, schedule, config, [rng])
    new, tr_step, rot_step = out[0]
    return new, (tr_step, rot_step)


def reverse_steps(systems, ts, dt, model: ScoreModel, schedule, config: SamplerConfig, rngs):
    """Batched reverse step; one model call for all systems."""
    cond = config.condition if model.conditional else None
    inputs = [
        ScoreModelInput(s, sigma_at(schedule, t, Channel.TRANSLATION), sigma_at(schedule, t, Channel.ROTATION), cond)
        for s, t in zip(systems, ts)
    ]
    outs = model.predict(inputs)
    result = []
    for s, t, o, rng in zip(systems, ts, outs, rngs):
        if not (np.isfinite(o.tr_vec).all() and np.isfinite(o.rot_vec).all()):
            raise NonFiniteScore(f"non-finite score at t={t:.4f}")
        d_tr, d_rot = pose_increment(o.tr_vec, o.rot_vec, t, dt, schedule, config.mode, rng)
        result.append((apply_increment(s, d_tr, d_rot), float(np.linalg.norm(d_tr)), float(np.linalg.norm(d_rot))))
    return result


@dataclass
class SampleResult:
    system: AdslabSystem
    trajectory: list
    n_steps_used: int


def sample_many(slab: Sequence[AdslabSystem] | AdslabSystem, template, model: ScoreModel, config: SamplerConfig,
                schedule: NoiseSchedule, rngs: Sequence[np.random.Generator], templates=None,
                record_trajectory: bool = True, dump_path=None) -> list[SampleResult]:
    """Run independent reverse diffusions in lockstep (one batched model call per step).

    ``slab`` may be one slab shared by all runs or one slab per run; likewise
    ``templates`` overrides ``template`` per run. Each run draws from its own
    generator, so results do not depend on how runs are grouped.
    """
    n = len(rngs)
    slabs = list(slab) if isinstance(slab, (list, tuple)) else [slab] * n
    tpls = list(templates) if templates is not None else [template] * n
    if len(slabs) != n or len(tpls) != n:
        raise ContractViolation("slabs/templates/rngs length mismatch")
    systems = [init_placement(s, tp, r, config.interstitial_gap) for s, tp, r in zip(slabs, tpls, rngs)]
    trajs = [[] for _ in range(n)]
    used = [0] * n
    active = list(range(n))
    dt = 1.0 / config.n_steps
    # an infinite tolerance switches early stopping off
    early_stop = np.isfinite(config.tr_tol) and np.isfinite(config.rot_tol)
    if record_trajectory:
        for k in range(n):
            trajs[k].append(StepInfo(0, 1.0, 0.0, 0.0, center_of_mass(systems[k]), adsorbate_orientation(systems[k], tpls[k])))
    for step in range(config.n_steps):
        if not active:
            break
        t = 1.0 - step / config.n_steps
        try:
            out = reverse_steps([systems[k] for k in active], [t] * len(active), dt, model, schedule, config,
                                [rngs[k] for k in active])
        except NonFiniteScore as exc:
            exc.trajectory = [[s.to_dict() for s in tr] for tr in trajs]
            if dump_path is not None:
                write_trajectories(dump_path, trajs)
            raise
        still = []
        for k, (new, tr_step, rot_step) in zip(active, out):
            systems[k] = new
            used[k] = step + 1
            if record_trajectory:
                trajs[k].append(StepInfo(step + 1, t, tr_step, rot_step, center_of_mass(new), adsorbate_orientation(new, tpls[k])))
            if not early_stop or not (tr_step < config.tr_tol and rot_step < config.rot_tol):
                still.append(k)
        active = still
    if dump_path is not None:
        write_trajectories(dump_path, trajs)
    return [SampleResult(systems[k], trajs[k], used[k]) for k in range(n)]


def sample_pose(slab, template, model: ScoreModel, config: SamplerConfig, schedule: NoiseSchedule,
                rng: Optional[np.random.Generator] = None, dump_path=None):
    """Initial random placement followed by reverse diffusion; returns (system, trajectory, n_steps_used)."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    res = sample_many(slab, template, model, config, schedule, [rng], dump_path=dump_path)[0]
    return res.system, res.trajectory, res.n_steps_used


def write_trajectories(path, trajectories) -> None:
    """One JSON object per line: run index plus step record."""
    with open(path, "w") as fh:
        for run, tr in enumerate(trajectories):
            for s in tr:
                rec = s.to_dict() if hasattr(s, "to_dict") else dict(s)
                rec["run"] = run
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trajectories(path) -> list[list[dict]]:
    runs: dict[int, list] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                runs.setdefault(rec.pop("run"), []).append(rec)
    return [runs[k] for k in sorted(runs)]


class AnalyticWellScore:
    """Closed-form score of a Gaussian well at in-plane site ``mu`` (for checks and baselines).

    Translation score is ``-(x - mu) / sigma_tr**2`` using the minimum-image
    in-plane displacement; the rotation score is zero.
    """

    conditional = False

    def __init__(self, mu_xy, cell):
        self.mu = np.asarray(mu_xy, float)
        self.cell = cell

    def predict(self, inputs):
        out = []
        for inp in inputs:
            com = center_of_mass(inp.system)
            d = np.zeros(3)
            d[:2] = com[:2] - self.mu
            d = minimum_image(inp.system.cell, d)
            out.append(ScoreModelOutput(-d[:2] / inp.tr_sigma**2, np.zeros(3)))
        return out

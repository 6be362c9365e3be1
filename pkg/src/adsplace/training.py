"""Denoising score-matching training of the reference score net."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import igso3
from .errors import ConfigError, ContractViolation, GradientOverflow
from .lattice import AdslabSystem
from .noise import (
    ConditionMode,
    NoiseSchedule,
    TrainingSample,
    condition_value,
    forward_perturb,
    select_training_samples,
    stack_targets,
)
from .score_net import NetConfig, ReferenceScoreNet, ScoreModelInput, load_model, read_checkpoint

log = logging.getLogger(__name__)

# Peak learning rates: the reference net default and the large-GNN settings
# (pretraining and finetuning) kept for configs that want them.
LR_PRESETS = {"reference": 1e-3, "large_gnn": 4e-4, "large_gnn_finetune": 1e-4}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    final_lr_ratio: float = 0.0
    weight_decay: float = 1e-6
    mode: str = ConditionMode.CONDITIONAL.value
    # Optional first stage on the lowest-energy placement of each system only.
    pretrain_steps: int = 0
    pretrain_lr: Optional[float] = None
    val_fraction: float = 0.0
    val_every: int = 100
    val_draws: int = 8
    # Uniform upward shift (Å) of the adsorbate applied to training inputs.
    z_jitter: float = 0.0
    # When set, the main stage runs this many passes over its samples and
    # ``steps`` is ignored (so conditional runs take more steps than unconditional).
    epochs: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.pretrain_steps < 0 or self.steps + self.pretrain_steps < 1:
            raise ConfigError("need at least one training step")
        if self.batch_size < 1 or self.peak_lr <= 0 or self.val_every < 1 or self.val_draws < 1:
            raise ConfigError("batch_size, peak_lr, val_every and val_draws must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.epochs is not None and self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        ConditionMode(self.mode)

    @property
    def total_steps(self) -> int:
        return self.pretrain_steps + self.steps


def learning_rate(step: int, n_steps: int, peak: float, warmup: int, final_ratio: float = 0.0) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``final_ratio * peak`` (step is 0-based)."""
    warmup = min(warmup, max(n_steps - 1, 0))
    if step < warmup:
        return peak * (step + 1) / warmup
    span = max(n_steps - warmup, 1)
    progress = min((step - warmup) / span, 1.0)
    lo = final_ratio * peak
    return lo + 0.5 * (peak - lo) * (1 + math.cos(math.pi * progress))


def epoch_steps(epochs: float, n_samples: int, batch_size: int) -> int:
    """Optimiser steps for ``epochs`` passes over ``n_samples`` (at least one)."""
    return max(1, math.ceil(epochs * n_samples / batch_size))


def stage_of(step: int, cfg: TrainConfig) -> tuple[str, int, int, float]:
    """(stage name, step within stage, stage length, peak rate) for a global step."""
    if step < cfg.pretrain_steps:
        return "pretrain", step, cfg.pretrain_steps, cfg.pretrain_lr or cfg.peak_lr
    return "main", step - cfg.pretrain_steps, cfg.steps, cfg.peak_lr


def split_by_system(samples: Sequence[TrainingSample], fraction: float, rng: np.random.Generator):
    """Hold out whole systems for validation (no leakage between placements)."""
    ids = sorted({s.system_id for s in samples})
    n_val = int(round(fraction * len(ids)))
    if fraction > 0 and n_val == 0 and len(ids) > 1:
        n_val = 1
    held = set(rng.permutation(ids)[:n_val].tolist()) if n_val else set()
    train = [s for s in samples if s.system_id not in held]
    val = [s for s in samples if s.system_id in held]
    return train, val


def _jitter(system: AdslabSystem, dz: float) -> AdslabSystem:
    if dz == 0.0:
        return system
    pos = system.positions.copy()
    pos[system.adsorbate_mask, 2] += dz
    return system.with_positions(pos)


def make_batch(samples: Sequence[TrainingSample], mode, schedule, table, rng, z_jitter=0.0, times=None):
    """Perturb samples at random (or given) diffusion times; return model inputs, targets, weights."""
    inputs, targets = [], []
    for k, s in enumerate(samples):
        t = float(rng.uniform()) if times is None else float(times[k])
        dz = float(rng.uniform(0.0, z_jitter)) if z_jitter > 0 else 0.0
        perturbed, target = forward_perturb(s, t, schedule, table, rng)
        inputs.append(ScoreModelInput(_jitter(perturbed, dz), target.tr_sigma, target.rot_sigma, condition_value(s, mode)))
        targets.append(target)
    return inputs, stack_targets(targets), np.array([s.weight for s in samples], float)


@dataclass
class FixedSet:
    """A deterministic validation set: fixed noise draws at stratified times."""

    inputs: list
    target: object
    weights: np.ndarray


def build_fixed_set(samples, mode, schedule, table, draws: int, seed: int) -> Optional[FixedSet]:
    if not samples:
        return None
    rng = np.random.default_rng([seed, 7919])
    rep = [s for s in samples for _ in range(draws)]
    times = np.tile((np.arange(draws) + 0.5) / draws, len(samples))
    inputs, target, weights = make_batch(rep, mode, schedule, table, rng, times=times)
    return FixedSet(inputs, target, weights)


def evaluate_fixed(model: ReferenceScoreNet, fixed: FixedSet, chunk: int = 128) -> float:
    total, wsum = 0.0, 0.0
    with torch.no_grad():
        for a in range(0, len(fixed.inputs), chunk):
            sl = slice(a, a + chunk)
            tgt = type(fixed.target)(fixed.target.tr_score[sl], fixed.target.rot_score[sl],
                                     fixed.target.tr_sigma[sl], fixed.target.rot_sigma[sl], fixed.target.t[sl])
            w = fixed.weights[sl]
            total += float(model.loss(fixed.inputs[sl], tgt, w)) * w.sum()
            wsum += w.sum()
    return total / wsum


# -- checkpoints with optimizer state ---------------------------------------------


def _optimizer_arrays(model: ReferenceScoreNet, opt: torch.optim.Optimizer) -> dict:
    out = {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        out[f"opt/{name}/exp_avg"] = st["exp_avg"].detach().numpy().copy()
        out[f"opt/{name}/exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().copy()
        out[f"opt/{name}/step"] = np.array(float(st["step"]))
    return out


def _restore_optimizer(model: ReferenceScoreNet, opt: torch.optim.Optimizer, arrays: dict) -> None:
    for name, p in model.named_parameters():
        key = f"opt/{name}/exp_avg"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[f"opt/{name}/step"])),
            "exp_avg": torch.tensor(arrays[key]),
            "exp_avg_sq": torch.tensor(arrays[f"opt/{name}/exp_avg_sq"]),
        }


def save_training_checkpoint(path, model, opt, step, rng, train_cfg, schedule, best_val, history_len):
    meta = {
        "train": asdict(train_cfg),
        "schedule": asdict(schedule),
        "step": step,
        "rng_state": rng.bit_generator.state,
        "best_val": best_val,
        "history_len": history_len,
    }
    tmp = f"{path}.tmp"
    model.save(tmp, extra_meta=meta, extra_arrays=_optimizer_arrays(model, opt))
    os.replace(tmp, path)


@dataclass
class TrainResult:
    model: ReferenceScoreNet
    history: list = field(default_factory=list)
    best_val: float = float("inf")
    best_step: int = -1
    checkpoint: Optional[str] = None
    best_checkpoint: Optional[str] = None
    n_train_samples: int = 0


def _draw_batch(step, cfg: TrainConfig, pre_set, main_set, schedule, table, rng):
    stage = stage_of(step, cfg)[0]
    mode = ConditionMode(cfg.mode)
    pool = pre_set if stage == "pretrain" else main_set
    idx = rng.integers(0, len(pool), size=cfg.batch_size)
    chosen = [pool[i] for i in idx]
    if stage == "pretrain" and mode is ConditionMode.CONDITIONAL:
        chosen = [TrainingSample(s.system, 0.0, s.weight, s.system_id) for s in chosen]
    return make_batch(chosen, mode, schedule, table, rng, cfg.z_jitter)


def _pools(samples, cfg: TrainConfig):
    mode = ConditionMode(cfg.mode)
    train_pool, val_pool = split_by_system(samples, cfg.val_fraction, np.random.default_rng([cfg.seed, 17]))
    main_set = select_training_samples(train_pool, mode)
    pre_set = select_training_samples(train_pool, ConditionMode.UNCONDITIONAL)
    if not main_set:
        raise ContractViolation("no training samples after selection")
    val_set = select_training_samples(val_pool, mode) if val_pool else main_set
    return pre_set, main_set, val_set


def _make_optimizer(model, cfg: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.peak_lr, weight_decay=cfg.weight_decay)


def write_loss_curve(history: list, path) -> None:
    with open(path, "w") as fh:
        fh.write("step\tstage\tlr\ttrain_loss\tval_loss\n")
        for h in history:
            val = "" if h.get("val_loss") is None else f"{h['val_loss']:.10g}"
            fh.write(f"{h['step']}\t{h['stage']}\t{h['lr']:.6g}\t{h['train_loss']:.10g}\t{val}\n")


def train(
    samples: Sequence[TrainingSample],
    net_config: NetConfig,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    table: igso3.IgSo3Table,
    out_dir=None,
    resume: Optional[str] = None,
    stop_after: Optional[int] = None,
) -> TrainResult:
    """Train a score net; checkpoints (``last.npz``, ``best.npz``) and ``loss_curve.tsv`` go to ``out_dir``.

    ``stop_after`` ends the run early after that many global steps (the
    schedule still assumes the full length), which together with ``resume``
    allows interrupted runs to be continued exactly.
    """
    mode = ConditionMode(cfg.mode)
    if net_config.conditional != (mode is ConditionMode.CONDITIONAL):
        raise ConfigError("net conditional flag and training mode disagree")
    pre_set, main_set, val_set = _pools(samples, cfg)
    if cfg.epochs is not None:
        cfg = replace(cfg, steps=epoch_steps(cfg.epochs, len(main_set), cfg.batch_size))
    fixed = build_fixed_set(val_set, mode, schedule, table, cfg.val_draws, cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        meta, arrays = read_checkpoint(resume)
        model = load_model(resume, table=table)
        if model.config != net_config:
            raise ConfigError("resume checkpoint architecture differs from the requested one")
        opt = _make_optimizer(model, cfg)
        _restore_optimizer(model, opt, arrays)
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        start = int(meta["step"])
        best_val = float(meta["best_val"])
        history = []
        if out is not None and (out / "loss_curve.tsv").exists():
            history = _read_loss_curve(out / "loss_curve.tsv")[: meta["history_len"]]
    else:
        model = ReferenceScoreNet(net_config, table, seed=cfg.seed)
        opt = _make_optimizer(model, cfg)
        rng = np.random.default_rng([cfg.seed, 1])
        start, best_val, history = 0, float("inf"), []

    result = TrainResult(model, history, best_val, n_train_samples=len(main_set))
    end = cfg.total_steps if stop_after is None else min(cfg.total_steps, stop_after)
    last_path = str(out / "last.npz") if out is not None else None
    best_path = str(out / "best.npz") if out is not None else None
    best_params = {k: v.detach().clone() for k, v in model.params.items()}

    for step in range(start, end):
        stage, local, length, peak = stage_of(step, cfg)
        lr = learning_rate(local, length, peak, cfg.warmup_steps, cfg.final_lr_ratio)
        for g in opt.param_groups:
            g["lr"] = lr
        inputs, target, weights = _draw_batch(step, cfg, pre_set, main_set, schedule, table, rng)
        opt.zero_grad(set_to_none=True)
        try:
            loss = model.loss(inputs, target, weights)
            if not torch.isfinite(loss):
                raise GradientOverflow(f"non-finite loss at step {step}", batch_id=step)
            loss.backward()
            for name, p in model.params.items():
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise GradientOverflow(f"non-finite gradient in {name} at step {step}", batch_id=step)
        except GradientOverflow:
            if last_path is not None:
                save_training_checkpoint(last_path, model, opt, step, rng, cfg, schedule, best_val, len(history))
                write_loss_curve(history, out / "loss_curve.tsv")
            log.error("training aborted at step %d; last good state in %s", step, last_path)
            raise
        opt.step()
        rec = {"step": step, "stage": stage, "lr": lr, "train_loss": float(loss.item()), "val_loss": None}

        done = step + 1
        if done % cfg.val_every == 0 or done == cfg.total_steps:
            val = evaluate_fixed(model, fixed)
            rec["val_loss"] = val
            if val < best_val:
                best_val = val
                result.best_step = step
                best_params = {k: v.detach().clone() for k, v in model.params.items()}
                if best_path is not None:
                    model.save(best_path, extra_meta={"step": done, "val_loss": val})
            log.info("step %d/%d lr %.3g train %.4f val %.4f", done, cfg.total_steps, lr, rec["train_loss"], val)
        history.append(rec)

    if last_path is not None:
        save_training_checkpoint(last_path, model, opt, end, rng, cfg, schedule, best_val, len(history))
        write_loss_curve(history, out / "loss_curve.tsv")
    result.history = history
    result.best_val = best_val
    result.checkpoint = last_path
    result.best_checkpoint = best_path if best_path and os.path.exists(best_path) else None
    if end == cfg.total_steps and np.isfinite(best_val):
        best = ReferenceScoreNet(net_config, table, {k: v.clone().requires_grad_(True) for k, v in best_params.items()},
                                 seed=cfg.seed)
        result.model = best
    return result


def _read_loss_curve(path) -> list:
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            step, stage, lr, tr, val = line.rstrip("\n").split("\t")
            rows.append({"step": int(step), "stage": stage, "lr": float(lr), "train_loss": float(tr),
                         "val_loss": float(val) if val else None})
    return rows


def next_step_loss(samples, net_config, cfg, schedule, table, checkpoint) -> float:
    """Loss of the step a run resumed from ``checkpoint`` would take next (no update applied)."""
    meta, _ = read_checkpoint(checkpoint)
    model = load_model(checkpoint, table=table)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    pre_set, main_set, _ = _pools(samples, cfg)
    inputs, target, weights = _draw_batch(int(meta["step"]), cfg, pre_set, main_set, schedule, table, rng)
    with torch.no_grad():
        return float(model.loss(inputs, target, weights))


def save_samples(samples: Sequence[TrainingSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def load_samples(path) -> list[TrainingSample]:
    with open(path) as fh:
        return [TrainingSample.from_dict(json.loads(line)) for line in fh if line.strip()]

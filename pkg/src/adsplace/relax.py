"""L-BFGS relaxation of adslab structures with fixed-atom constraints."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericalBlowup
from .lattice import AdslabSystem
from .potentials import CalculatorSpec, evaluate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelaxConfig:
    maxstep: float = 0.04
    memory: int = 50
    damping: float = 1.0
    alpha: float = 70.0
    fmax: float = 0.01
    max_iterations: int = 300
    # Curvature pairs with s.y below this are dropped (keeps H positive definite).
    curvature_eps: float = 1e-10
    # Max step halvings when a proposed step raises the energy.
    max_backtracks: int = 8

    def __post_init__(self):
        for name in ("maxstep", "damping", "alpha", "fmax"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.memory < 1 or self.max_iterations < 1:
            raise ValueError("memory and max_iterations must be >= 1")


@dataclass
class RelaxResult:
    system: AdslabSystem
    energy: float
    n_iterations: int
    converged: bool
    failed: bool = False
    fmax: float = float("nan")
    trajectory: list = field(default_factory=list)


def max_force(forces, free_mask) -> float:
    f = np.where(free_mask[:, None], forces, 0.0)
    return float(np.sqrt((f**2).sum(axis=1)).max()) if len(f) else 0.0


def relax(
    system: AdslabSystem,
    calculator: CalculatorSpec,
    config: Optional[RelaxConfig] = None,
    record_trajectory: bool = False,
) -> RelaxResult:
    """Two-loop L-BFGS on FREE_SLAB and ADSORBATE atoms.

    The step ``-H g`` is damped and then scaled down uniformly whenever any
    atom would move further than ``maxstep``. Steps that raise the energy are
    rejected: the curvature memory is cleared and the step is halved until
    the energy does not increase, so the energy sequence over accepted
    iterations is non-increasing. FIXED_SLAB atoms never move.

    Where the last step saw non-positive curvature (concave region, e.g. the
    attractive tail of a pair potential) the quadratic model has no minimum
    and the step goes along the force to the ``maxstep`` boundary instead.
    """
    cfg = config or RelaxConfig()
    free = system.free_mask
    x = system.positions.copy()
    traj = []

    def energy_grad(pos):
        ef = evaluate(calculator, system.with_positions(pos))
        g = -ef.forces
        g[~free] = 0.0
        return ef.energy, g

    try:
        E, g = energy_grad(x)
    except NumericalBlowup as exc:
        log.warning("relaxation aborted at start: %s", exc)
        return RelaxResult(system.copy(), float("nan"), 0, False, failed=True)

    s_hist: deque = deque(maxlen=cfg.memory)
    y_hist: deque = deque(maxlen=cfg.memory)
    rho_hist: deque = deque(maxlen=cfg.memory)
    h0 = 1.0 / cfg.alpha
    n_iter = 0
    failed = False
    concave = False
    fm = max_force(-g, free)
    if record_trajectory:
        traj.append({"iteration": 0, "energy": E, "fmax": fm, "step": 0.0})

    while fm > cfg.fmax and n_iter < cfg.max_iterations:
        n_iter += 1
        q = g.reshape(-1).copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        r = h0 * q
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ r)
            r += s * (a - b)
        step = -r.reshape(x.shape) * cfg.damping
        step[~free] = 0.0
        longest = np.sqrt((step**2).sum(axis=1)).max()
        if longest > cfg.maxstep or (concave and not s_hist and longest > 0):
            step *= cfg.maxstep / longest

        try:
            for _ in range(cfg.max_backtracks + 1):
                x_new = x + step
                E_new, g_new = energy_grad(x_new)
                if E_new <= E + 1e-12 * max(1.0, abs(E)):
                    break
                # Uphill: forget curvature, fall back to a shorter steepest-descent step.
                s_hist.clear()
                y_hist.clear()
                rho_hist.clear()
                step = 0.5 * step if np.dot(step.ravel(), -g.ravel()) > 0 else -h0 * g
                longest = np.sqrt((step**2).sum(axis=1)).max()
                if longest > cfg.maxstep:
                    step *= cfg.maxstep / longest
            else:
                log.debug("no descent after %d backtracks; stopping", cfg.max_backtracks)
                break
        except NumericalBlowup as exc:
            log.warning("relaxation stopped after %d iterations: %s", n_iter, exc)
            failed = True
            break

        s = (x_new - x).reshape(-1)
        y = (g_new - g).reshape(-1)
        sy = s @ y
        concave = sy <= 0
        if sy > cfg.curvature_eps:
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
        x, E, g = x_new, E_new, g_new
        fm = max_force(-g, free)
        if record_trajectory:
            traj.append({"iteration": n_iter, "energy": E, "fmax": fm,
                         "step": float(np.sqrt((s.reshape(-1, 3) ** 2).sum(axis=1)).max())})

    out = system.with_positions(np.where(free[:, None], x, system.positions))
    return RelaxResult(out, float(E), n_iter, bool(fm <= cfg.fmax), failed, fm, traj)

"""Figures for evaluation summaries and training curves (written to PNG files)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}
LABELS = {"diffusion": "diffusion + relax", "random_baseline": "random + relax"}
MARKERS = {"diffusion": "o", "random_baseline": "s"}


def _by_method(rows: Sequence[dict], key: str) -> dict:
    out: dict[str, tuple[list, list]] = {}
    for r in sorted(rows, key=lambda r: (r["method"], r["nsites"])):
        xs, ys = out.setdefault(r["method"], ([], []))
        xs.append(r["nsites"])
        ys.append(r[key])
    return out


def rate_vs_nsites(rows: Sequence[dict], key: str, ylabel: str, path) -> Path:
    """One line per method of ``key`` against the number of sites."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for method, (xs, ys) in _by_method(rows, key).items():
            ax.plot(xs, 100 * np.asarray(ys), marker=MARKERS.get(method, "^"), label=LABELS.get(method, method))
        ax.set_xscale("log")
        ticks = sorted({r["nsites"] for r in rows})
        ax.set_xticks(ticks)
        ax.set_xticklabels([str(t) for t in ticks])
        ax.set_xlabel("sites per system")
        ax.set_ylabel(ylabel)
        ax.set_ylim(-2, 102)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def success_plot(rows, path) -> Path:
    return rate_vs_nsites(rows, "success_rate", "success rate (%)", path)


def anomaly_plot(rows, path) -> Path:
    return rate_vs_nsites(rows, "anomaly_rate", "anomaly rate (%)", path)


def loss_curve_plot(history: Sequence[dict], path) -> Path:
    path = Path(path)
    steps = np.array([h["step"] for h in history])
    train = np.array([h["train_loss"] for h in history])
    val = [(h["step"], h["val_loss"]) for h in history if h.get("val_loss") is not None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, train, lw=0.6, alpha=0.5, label="train (batch)")
        if len(train) >= 20:
            w = max(len(train) // 50, 5)
            smooth = np.convolve(train, np.ones(w) / w, mode="valid")
            ax.plot(steps[w - 1:], smooth, lw=1.2, label=f"train ({w}-step mean)")
        if val:
            vs, vl = zip(*val)
            ax.plot(vs, vl, marker="o", ms=3, label="validation")
        ax.set_xlabel("step")
        ax.set_ylabel("denoising score-matching loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path

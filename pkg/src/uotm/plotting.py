"""PNG figures for run directories, rendered with the Agg backend."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_density(path, bins: np.ndarray, columns: dict, title: str = "") -> None:
    """Step plot of density histograms sharing ``bins`` (an (n, 2) edge table)."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    edges = np.append(bins[:, 0], bins[-1, 1])
    for name, dens in columns.items():
        ax.stairs(dens, edges, label=name, fill=name == "generated", alpha=0.45 if name == "generated" else 1.0)
    ax.set_xlabel("y")
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.legend(fontsize=8)
    _finish(fig, path)


def plot_transport_map(path, x: np.ndarray, tx: np.ndarray, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4, 3.2))
    ax.plot(x, tx, lw=1.5)
    ax.set_xlabel("x")
    ax.set_ylabel("T(x, z=0)")
    ax.set_title(title)
    _finish(fig, path)


def plot_metric_curves(path, runs: dict, metric: str = "kl") -> None:
    """One line per run of ``metric`` against epoch; ``runs`` maps label to rows."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    drawn = 0
    for label, rows in runs.items():
        pts = [(r["epoch"], r[metric]) for r in rows if math.isfinite(r.get(metric, math.nan))]
        if pts:
            e, v = zip(*pts)
            ax.plot(e, v, marker=".", label=label)
            drawn += 1
    if metric == "kl" and drawn:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric)
    if drawn:
        ax.legend(fontsize=7)
    _finish(fig, path)

"""Figures written next to the CSV reports."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _figure(width: float = 5.0, height: float | None = None):
    if height is None:
        height = width * (math.sqrt(5) - 1) / 2
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(RC):
        # no software stamp, so identical runs give identical PNG bytes
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_rf_histogram(hist: dict[int, int], path):
    fig, ax = _figure()
    extents = list(hist)
    ax.bar(extents, [hist[e] for e in extents], width=1.6, color="tab:blue")
    ax.set_xlabel("receptive field (voxels per side)")
    ax.set_ylabel("number of paths")
    ax.set_title(f"{sum(hist.values())} paths, {min(extents)} to {max(extents)} voxels")
    return _save(fig, path)


def plot_border_curve(rows, path, plateau: int | None = None):
    fig, ax = _figure()
    b = [r[0] for r in rows]
    m = [r[1] for r in rows]
    e = [r[2] for r in rows]
    ax.errorbar(b, m, yerr=e, marker="o", ms=3, capsize=2)
    if plateau is not None:
        ax.axvline(plateau, color="grey", ls="--", lw=1)
    ax.set_xlabel("discarded border (voxels per side)")
    ax.set_ylabel("mean DCS")
    return _save(fig, path)


def plot_samples_vs_dcs(rows, path):
    fig, ax = _figure()
    m = [r[0] for r in rows]
    mean = [r[1] for r in rows]
    se = [r[2] for r in rows]
    ax.plot(m, mean, marker="o", ms=3)
    ax.fill_between(m, [a - s for a, s in zip(mean, se)], [a + s for a, s in zip(mean, se)], alpha=0.25)
    ax.set_xlabel("Monte Carlo samples")
    ax.set_ylabel("mean DCS")
    return _save(fig, path)


def plot_accuracy_vs_threshold(rows, path):
    fig, ax = _figure()
    t = [r[0] for r in rows]
    ax.plot(t, [r[1] for r in rows], marker="o", ms=3, label="voxel accuracy")
    ax.plot(t, [r[2] for r in rows], ls="--", label="retained fraction")
    ax.set_xlabel("uncertainty threshold")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_training_log(rows, path):
    fig, ax = _figure()
    steps = [int(r["step"]) for r in rows]
    ax.plot(steps, [float(r["loss"]) for r in rows], lw=0.8, label="loss")
    val = [(int(r["step"]), float(r["val_mean_dcs"])) for r in rows if r["val_mean_dcs"]]
    if val:
        ax.plot(*zip(*val), marker="o", ms=3, label="validation mean DCS")
    ax.set_xlabel("step")
    ax.legend(frameon=False)
    return _save(fig, path)

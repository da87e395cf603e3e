"""Matplotlib figures for run reports (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import ConfusionMatrix  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 9,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    # No software/version stamp, so reruns write identical files.
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_accuracy_curves(curves: Mapping[str, tuple[Sequence[int], Sequence[float]]], path: str | Path,
                         title: str = "Testing accuracy") -> Path:
    """Mean test accuracy against FL round, one line per strategy."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.8))
        for name, (rounds, acc) in curves.items():
            ax.plot(rounds, 100 * np.asarray(acc), marker="o", markersize=2.5, linewidth=1.2, label=name)
        ax.set_xlabel("FL round")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_ylabel("Accuracy (%)")
        ax.set_title(title)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_confusion(cm: ConfusionMatrix, path: str | Path, title: str = "") -> Path:
    """Row-normalized confusion matrix with raw counts annotated."""
    counts = cm.counts.astype(float)
    rows = counts.sum(axis=1, keepdims=True)
    frac = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    n = cm.num_classes
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(1.0 + 0.75 * n, 0.6 + 0.75 * n))
        im = ax.imshow(frac, cmap="Blues", vmin=0.0, vmax=1.0)
        for i in range(n):
            for j in range(n):
                ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center", fontsize=8,
                        color="white" if frac[i, j] > 0.5 else "black")
        ax.set_xticks(range(n), cm.class_names, rotation=45, ha="right")
        ax.set_yticks(range(n), cm.class_names)
        ax.set_xlabel("Predicted label")
        ax.set_ylabel("True label")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        return _save(fig, path)


def plot_histograms(edges: np.ndarray, counts: Mapping[int, np.ndarray], path: str | Path,
                    xlabel: str = "", title: str = "") -> Path:
    """Overlaid per-client density histograms on shared bins."""
    widths = np.diff(edges)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.8))
        for client_id, c in counts.items():
            total = c.sum()
            density = c / (total * widths) if total else np.zeros_like(widths)
            ax.stairs(density, edges, label=f"client {client_id}", linewidth=1.2)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("Density")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)

"""Figures for ``qgnntrack report``; imported lazily so the core never loads matplotlib."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRICS = ("accuracy", "precision", "recall", "specificity")

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_curves(curves: Mapping[str, tuple[Sequence[int], Sequence[float], Sequence[float]]], path,
                ylabel: str = "validation accuracy") -> Path:
    """One line per label with a +-1 std band; ``curves[label] = (epochs, mean, std)``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, (epochs, mean, std) in curves.items():
            line, = ax.plot(epochs, mean, label=label)
            lo = [m - s for m, s in zip(mean, std)]
            hi = [m + s for m, s in zip(mean, std)]
            ax.fill_between(epochs, lo, hi, color=line.get_color(), alpha=0.2, linewidth=0)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.legend()
        return _save(fig, path)


def plot_table(rows: Sequence[Mapping], path) -> Path:
    """Grouped bars of the final metrics, one group per metric and one bar per model."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        width = 0.8 / max(len(rows), 1)
        for i, row in enumerate(rows):
            xs = [j + (i - (len(rows) - 1) / 2) * width for j in range(len(METRICS))]
            ax.bar(xs, [row[m] for m in METRICS], width, yerr=[row[f"{m}_std"] for m in METRICS],
                   label=row["model"], capsize=2)
        ax.set_xticks(range(len(METRICS)), METRICS)
        ax.set_ylim(0, 1.05)
        ax.legend(fontsize=8, loc="lower right")
        return _save(fig, path)


def plot_pileup(mus: Sequence[int], mean: Sequence[float], std: Sequence[float], path,
                label: str = "final validation accuracy") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.errorbar(mus, mean, yerr=std, marker="o", capsize=3)
        ax.set_xlabel("pileup mu")
        ax.set_ylabel(label)
        return _save(fig, path)

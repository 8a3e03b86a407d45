"""Figures for the ``report`` command, written straight to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import CDFReport  # noqa: E402

# No timestamps or version strings, so reruns give identical bytes.
_PNG_METADATA = {"Software": None}


def _style(ax):
    ax.grid(axis="y", linestyle="--", linewidth=0.6, alpha=0.7)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)


def savefig(fig, filename) -> Path:
    path = Path(filename)
    fig.savefig(path, dpi=100, bbox_inches="tight", pad_inches=0.1, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def plot_cdf(report: CDFReport, filename, title: str = "", xlabel: str = "score") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    t = report.thresholds
    width = 0.8 * float(np.min(np.diff(t))) if t.size > 1 else 1.0
    ax.bar(t, report.fractions, width=width, color="tab:blue", alpha=0.35, edgecolor="tab:blue")
    ax.set_ylim(0, 1.0)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("cumulative ratio")
    if title:
        ax.set_title(title, fontsize=10)
    _style(ax)
    return savefig(fig, filename)


def plot_scatter(gold, predicted, filename, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(gold, predicted, s=6, alpha=0.5, color="tab:orange", linewidths=0)
    ax.set_xlabel("gold score")
    ax.set_ylabel("predicted score")
    if title:
        ax.set_title(title, fontsize=10)
    _style(ax)
    return savefig(fig, filename)

"""Matplotlib figures written next to the text reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {"font.size": 9, "axes.spines.top": False, "axes.spines.right": False}


def plot_frame_scores(path, p_joint: np.ndarray, attention: np.ndarray, gt: Sequence[float], pred: Sequence[float] | None = None, title: str = "") -> Path:
    """Per-frame joint probability and attention for one query, GT span shaded."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    L = len(p_joint)
    t = (np.arange(L) + 0.5) / L
    with plt.rc_context(_STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 3.6), sharex=True)
        for ax in (ax1, ax2):
            ax.axvspan(gt[0], gt[1], color="tab:green", alpha=0.2, label="ground truth")
            if pred is not None:
                ax.axvspan(pred[0], pred[1], fill=False, hatch="//", edgecolor="tab:red", label="top prediction")
        ax1.plot(t, p_joint, marker=".", color="tab:blue")
        ax1.set_ylim(0, 1)
        ax1.set_ylabel("p")
        ax2.bar(t, attention, width=1.0 / L, color="tab:orange")
        ax2.set_ylabel("o")
        ax2.set_xlabel("normalized time")
        ax1.legend(loc="upper right", frameon=False, fontsize=7)
        if title:
            ax1.set_title(title)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def plot_alignment(path, gt_means: dict[str, float], non_gt_means: dict[str, float]) -> Path:
    """Grouped bars of mean probability inside vs outside the GT, one group per run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(gt_means)
    x = np.arange(len(names))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(names), 3))
        ax.bar(x - 0.2, [gt_means[n] for n in names], 0.4, label="GT")
        ax.bar(x + 0.2, [non_gt_means[n] for n in names], 0.4, label="non-GT")
        ax.set_xticks(x, names)
        ax.set_ylabel("mean p")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def plot_history(path, epochs: Sequence[int], series: dict[str, Sequence[float]], ylabel: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for name, ys in series.items():
            ax.plot(epochs[: len(ys)], ys, label=name)
        ax.set_xlabel("epoch")
        if ylabel:
            ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path

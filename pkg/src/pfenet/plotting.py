"""Report figures written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def loss_curve(losses: Sequence[float], lrs: Sequence[float], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(len(losses))
    ax.plot(steps, losses, lw=0.8, color="tab:blue", alpha=0.5, label="loss")
    if len(losses) >= 20:
        k = max(5, len(losses) // 50)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1:], smooth, color="tab:blue", label=f"loss ({k}-step mean)")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, color="tab:orange", lw=1, label="learning rate")
    ax2.set_ylabel("learning rate")
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, path)


def run_scores(rows: Sequence[dict], path: str | Path) -> Path:
    """mIoU and FB-IoU per evaluation run."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    runs = [int(r["run"]) for r in rows]
    ax.plot(runs, [r["miou"] for r in rows], "o-", label="mIoU")
    ax.plot(runs, [r["fb_iou"] for r in rows], "s-", label="FB-IoU")
    ax.set_xlabel("evaluation run")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1)
    ax.set_xticks(runs)
    ax.legend(fontsize=8)
    return _save(fig, path)


def arm_bars(labels: Sequence[str], means: Sequence[float], stds: Sequence[float],
             path: str | Path, ylabel: str = "mean mIoU") -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(labels) + 1), 3.5))
    x = np.arange(len(labels))
    ax.bar(x, means, yerr=stds, capsize=3, color="tab:blue", alpha=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    lo = max(0.0, min(means) - 0.1) if means else 0.0
    ax.set_ylim(lo, min(1.0, max(means) + 0.1) if means else 1.0)
    return _save(fig, path)


def prior_panel(query: np.ndarray, support: np.ndarray, support_mask: np.ndarray,
                prior: np.ndarray, path: str | Path, query_mask: np.ndarray | None = None) -> Path:
    """Query, support (mask outlined) and the prior map upsampled to image size."""
    cols = 4 if query_mask is not None else 3
    fig, axes = plt.subplots(1, cols, figsize=(2.4 * cols, 2.6))
    axes[0].imshow(query)
    axes[0].set_title("query")
    axes[1].imshow(support)
    axes[1].contour(support_mask, levels=[0.5], colors="w", linewidths=1)
    axes[1].set_title("support")
    im = axes[2].imshow(prior, cmap="gray", vmin=0, vmax=1)
    axes[2].set_title("prior")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    if query_mask is not None:
        axes[3].imshow(query_mask, cmap="gray", vmin=0, vmax=1)
        axes[3].set_title("query truth")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)

"""Matplotlib figure helpers. Every function writes a file and closes its figure."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def new_figure(ncols=1, nrows=1, width=4.0, aspect=0.8):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(nrows, ncols, figsize=(width * ncols, width * aspect * nrows))
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(RC):
        fig.savefig(path)
    plt.close(fig)
    return path


def trajectory_figure(gt_xy: np.ndarray, pred_xy: np.ndarray, path, title: str | None = None) -> Path:
    fig, ax = new_figure(width=4.5, aspect=1.0)
    ax.plot(gt_xy[:, 0], gt_xy[:, 1], color="black", lw=1.2, label="ground truth")
    ax.plot(pred_xy[:, 0], pred_xy[:, 1], color="red", lw=0.9, label="prediction")
    if len(gt_xy):
        ax.plot(gt_xy[0, 0], gt_xy[0, 1], marker="*", color="black", ms=12, ls="none", label="start")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", frameon=False)
    if title:
        ax.set_title(title)
    return save(fig, path)


def saliency_figure(image: np.ndarray, saliency: np.ndarray, path) -> Path:
    """Side-by-side input crop (HxWx3 in [0, 1]) and saliency heat map."""
    fig, (a, b) = new_figure(ncols=2, width=3.0, aspect=1.0)
    a.imshow(np.clip(image, 0, 1))
    a.set_title("input")
    b.imshow(saliency, cmap="hot", vmin=0.0, vmax=1.0)
    b.set_title("saliency")
    for ax in (a, b):
        ax.axis("off")
    return save(fig, path)


def distance_profile_figure(distances: np.ndarray, anchor: int, path, label: str = "post-attention") -> Path:
    fig, ax = new_figure(width=5.0, aspect=0.5)
    ax.plot(np.arange(len(distances)), distances, lw=1.0, label=label)
    ax.axvline(anchor, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("frame")
    ax.set_ylabel("L2 feature distance")
    ax.legend(frameon=False)
    return save(fig, path)


def ablation_figure(names: list[str], pos: list[float], rot: list[float], path) -> Path:
    fig, (a, b) = new_figure(ncols=2, width=3.2, aspect=0.9)
    x = np.arange(len(names))
    a.bar(x, pos, color="0.4")
    a.set_ylabel("median position error [m]")
    b.bar(x, rot, color="0.7")
    b.set_ylabel("median rotation error [deg]")
    for ax in (a, b):
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20)
    return save(fig, path)

"""Saliency maps, feature-distance profiles and trajectory overlays."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .geometry import Trajectory
from .model import PoseNetwork


@dataclass
class SaliencyMap:
    values: np.ndarray  # H x W, in [0, 1]

    def save_text(self, path) -> Path:
        path = Path(path)
        np.savetxt(path, self.values, fmt="%.8f")
        return path


@dataclass
class FeatureDistanceProfile:
    anchor_index: int
    distances: np.ndarray


def saliency(model: PoseNetwork, image: torch.Tensor) -> SaliencyMap:
    """Input-gradient magnitude of ``sum|p| + sum|logq|``, channel max-abs, scaled to max 1.

    ``image`` is one preprocessed 3xHxW tensor. Model weights and their
    ``.grad`` fields are left untouched.
    """
    was_training = model.training
    model.eval()
    x = image.detach().clone().unsqueeze(0).requires_grad_(True)
    with torch.enable_grad():
        out = model(x)
        probe = out.p.abs().sum() + out.logq.abs().sum()
        (grad,) = torch.autograd.grad(probe, x)
    model.train(was_training)
    sal = grad[0].abs().amax(dim=0).double().numpy()
    peak = sal.max()
    if peak > 0:
        sal = sal / peak
    return SaliencyMap(sal)


@torch.no_grad()
def extract_features(model: PoseNetwork, frames: torch.Tensor, post_attention: bool = True) -> np.ndarray:
    """Features for each frame of an (N, 3, H, W) stack, one frame at a time so rows never depend on batch layout."""
    was_training = model.training
    model.eval()
    feats = [model.features(f.unsqueeze(0), post_attention)[0].double().numpy() for f in frames]
    model.train(was_training)
    return np.stack(feats)


def feature_distances(model: PoseNetwork, frames: torch.Tensor, anchor_index: int,
                      post_attention: bool = True) -> FeatureDistanceProfile:
    n = len(frames)
    if not -n <= anchor_index < n:
        raise IndexError(f"anchor {anchor_index} out of range for {n} frames")
    anchor_index %= n
    feats = extract_features(model, frames, post_attention)
    d = np.linalg.norm(feats - feats[anchor_index], axis=1)
    return FeatureDistanceProfile(anchor_index, d)


def path_distance(positions, anchor_index: int) -> np.ndarray:
    """Arc length along the sampled path from the anchor to each frame."""
    pts = np.asarray(positions, dtype=np.float64)
    seg = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    return np.abs(seg - seg[anchor_index])


def spearman(a, b) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    def ranks(x):
        x = np.asarray(x, dtype=np.float64)
        order = np.argsort(x, kind="stable")
        r = np.empty(len(x))
        r[order] = np.arange(len(x), dtype=np.float64)
        for v in np.unique(x):
            m = x == v
            if m.sum() > 1:
                r[m] = r[m].mean()
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra ** 2).sum() * (rb ** 2).sum())
    return float((ra * rb).sum() / denom) if denom > 0 else float("nan")


_PLANES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}


def trajectory_plot(predicted: Trajectory, ground_truth: Trajectory, out_path, plane: str = "xy",
                    title: str | None = None) -> dict[str, np.ndarray]:
    """Top-down overlay (ground truth black, prediction red, star at start).

    Returns the two plotted polylines as ``{"ground_truth": (N, 2), "predicted": (N, 2)}``.
    """
    if len(predicted) != len(ground_truth):
        raise ValueError(f"trajectory lengths differ: {len(predicted)} vs {len(ground_truth)}")
    i, j = _PLANES[plane]
    gt = ground_truth.positions[:, [i, j]]
    pr = predicted.positions[:, [i, j]]
    plotting.trajectory_figure(gt, pr, out_path, title)
    return {"ground_truth": gt, "predicted": pr}


def weights_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()

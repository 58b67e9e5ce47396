"""Learnable-weight L1 pose loss and its temporal (relative-pose) extension.

Per image::

    L = |p - p_t|_1 * exp(-beta) + beta + |logq - log q_t|_1 * exp(-gamma) + gamma

``logq`` is the network's native 3-vector rotation output. The temporal
loss adds, for every ordered pair (i, j) in a sampled tuple, the same form
applied to the relative quantities ``(p_i - p_j)`` and ``(logq_i - logq_j)``
scaled by ``temporal_alpha``; beta and gamma are shared.
"""
from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import TemporalConfig
from .errors import ConfigurationError
from .geometry import Pose

BETA0 = 0.0
GAMMA0 = -3.0


class LossState(nn.Module):
    def __init__(self, beta: float = BETA0, gamma: float = GAMMA0):
        super().__init__()
        self.beta = nn.Parameter(torch.tensor(float(beta)))
        self.gamma = nn.Parameter(torch.tensor(float(gamma)))

    def values(self) -> tuple[float, float]:
        return float(self.beta.detach()), float(self.gamma.detach())


def weighted_l1(dp: torch.Tensor, dlogq: torch.Tensor, beta, gamma) -> torch.Tensor:
    """Per-row loss for position/rotation residuals of shape (..., 3)."""
    return dp.abs().sum(-1) * torch.exp(-beta) + beta + dlogq.abs().sum(-1) * torch.exp(-gamma) + gamma


def batch_loss(p, logq, p_t, logq_t, state: LossState) -> torch.Tensor:
    """Mean per-image loss over a batch; tensors are (B, 3)."""
    return weighted_l1(p - p_t, logq - logq_t, state.beta, state.gamma).mean()


def pairwise_loss(p, logq, p_t, logq_t, state: LossState) -> torch.Tensor:
    """Sum over ordered pairs i != j of the relative-pose loss; tensors are (B, K, 3). Returns (B,)."""
    K = p.shape[-2]
    total = p.new_zeros(p.shape[:-2])
    for i, j in itertools.permutations(range(K), 2):
        dp = (p[..., i, :] - p[..., j, :]) - (p_t[..., i, :] - p_t[..., j, :])
        dl = (logq[..., i, :] - logq[..., j, :]) - (logq_t[..., i, :] - logq_t[..., j, :])
        total = total + weighted_l1(dp, dl, state.beta, state.gamma)
    return total


def batch_temporal_loss(p, logq, p_t, logq_t, state: LossState, alpha: float):
    """Mean over tuples of (absolute terms + alpha * pairwise terms); returns (total, pairwise part)."""
    absolute = weighted_l1(p - p_t, logq - logq_t, state.beta, state.gamma).sum(-1)
    pair = pairwise_loss(p, logq, p_t, logq_t, state)
    return (absolute + alpha * pair).mean(), pair.mean()


# single-sample API ---------------------------------------------------------

def _vec(x) -> torch.Tensor:
    if torch.is_tensor(x):
        t = x.detach().cpu().to(torch.float64)
    else:
        t = torch.as_tensor(np.array(x, dtype=np.float64))
    if not torch.all(torch.isfinite(t)):
        raise FloatingPointError(f"non-finite loss input {t.tolist()}")
    return t.reshape(-1)


def _bg(state) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(state, LossState):
        b, g = state.values()
    else:
        b, g = state
    if not (math.isfinite(b) and math.isfinite(g)):
        raise FloatingPointError("non-finite loss weights")
    return torch.tensor(b, dtype=torch.float64), torch.tensor(g, dtype=torch.float64)


def _residuals(pred, target: Pose):
    return _vec(pred.p) - _vec(target.p), _vec(pred.logq) - _vec(target.logq)


def single_image_loss(pred, target: Pose, state) -> float:
    """Loss of one prediction (anything with ``.p`` and ``.logq``) against a Pose.

    ``state`` is a LossState or a ``(beta, gamma)`` pair.
    """
    beta, gamma = _bg(state)
    dp, dl = _residuals(pred, target)
    return float(weighted_l1(dp, dl, beta, gamma))


def loss_grad_beta(pred, target: Pose, state) -> float:
    beta, _ = _bg(state)
    dp, _ = _residuals(pred, target)
    return float(-dp.abs().sum() * torch.exp(-beta) + 1)


def loss_grad_gamma(pred, target: Pose, state) -> float:
    _, gamma = _bg(state)
    _, dl = _residuals(pred, target)
    return float(-dl.abs().sum() * torch.exp(-gamma) + 1)


def temporal_loss(preds: Sequence, targets: Sequence[Pose], state, cfg: TemporalConfig) -> float:
    if len(preds) != len(targets):
        raise ConfigurationError(f"{len(preds)} predictions for {len(targets)} targets")
    if not preds:
        raise ConfigurationError("temporal loss needs at least one sample")
    beta, gamma = _bg(state)
    p = torch.stack([_vec(x.p) for x in preds])
    lq = torch.stack([_vec(x.logq) for x in preds])
    pt = torch.stack([_vec(t.p) for t in targets])
    lqt = torch.stack([_vec(t.logq) for t in targets])
    total = 0.0
    for k in range(len(preds)):
        total += float(weighted_l1(p[k] - pt[k], lq[k] - lqt[k], beta, gamma))
    for i, j in itertools.permutations(range(len(preds)), 2):
        dp = (p[i] - p[j]) - (pt[i] - pt[j])
        dl = (lq[i] - lq[j]) - (lqt[i] - lqt[j])
        total += cfg.temporal_alpha * float(weighted_l1(dp, dl, beta, gamma))
    return total

"""Non-local self-attention over a single feature vector.

The encoder output ``x`` (length C) is embedded three times into d = C/n
dimensions (theta, phi, g). The d x d similarity matrix is the outer product
``theta(x) phi(x)^T``; each row is softmax-normalized and applied to g(x).
The attended vector is re-embedded back to C dimensions and added to x.

``attention_forward`` / ``attention_vjp`` are a float64 numpy reference with
a hand-derived backward pass; ``SelfAttention`` is the torch layer used in
the network. Both compute the same function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError

PARAM_NAMES = ("W_theta", "W_phi", "W_g", "W_alpha")


@dataclass
class AttentionParams:
    W_theta: np.ndarray  # d x C
    W_phi: np.ndarray  # d x C
    W_g: np.ndarray  # d x C
    W_alpha: np.ndarray  # C x d

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d, C = self.W_theta.shape
        for name in ("W_phi", "W_g"):
            if getattr(self, name).shape != (d, C):
                raise ConfigurationError(f"{name} has shape {getattr(self, name).shape}, expected {(d, C)}")
        if self.W_alpha.shape != (C, d):
            raise ConfigurationError(f"W_alpha has shape {self.W_alpha.shape}, expected {(C, d)}")
        if C % d:
            raise ConfigurationError(f"embedding size {d} does not divide feature size {C}")
        if not all(np.all(np.isfinite(getattr(self, n))) for n in PARAM_NAMES):
            raise ConfigurationError("attention parameters must be finite")

    @property
    def C(self) -> int:
        return self.W_theta.shape[1]

    @property
    def d(self) -> int:
        return self.W_theta.shape[0]

    @classmethod
    def random(cls, C: int, n: int = 8, seed=None) -> "AttentionParams":
        """Uniform +-1/sqrt(fan_in) initialization."""
        d = embed_dim(C, n)
        rng = np.random.default_rng(seed)
        a, b = 1 / math.sqrt(C), 1 / math.sqrt(d)
        return cls(rng.uniform(-a, a, (d, C)), rng.uniform(-a, a, (d, C)),
                   rng.uniform(-a, a, (d, C)), rng.uniform(-b, b, (C, d)))

    def as_tuple(self):
        return tuple(getattr(self, n) for n in PARAM_NAMES)


@dataclass
class AttentionTrace:
    similarity: np.ndarray  # d x d, pre-softmax
    weights: np.ndarray  # d x d, row-stochastic
    attended: np.ndarray  # d, before re-embedding


def embed_dim(C: int, n: int) -> int:
    if n < 1 or C % n:
        raise ConfigurationError(f"feature size C={C} is not divisible by ratio n={n}")
    return C // n


def softmax_rows(S: np.ndarray) -> np.ndarray:
    z = S - S.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(x, params: AttentionParams) -> tuple[np.ndarray, AttentionTrace]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.C,):
        raise ConfigurationError(f"feature vector has shape {x.shape}, expected ({params.C},)")
    a = params.W_theta @ x
    b = params.W_phi @ x
    g = params.W_g @ x
    S = np.outer(a, b)
    A = softmax_rows(S)
    y = A @ g
    out = params.W_alpha @ y + x
    return out, AttentionTrace(S, A, y)


def attention_vjp(x, params: AttentionParams, grad_out) -> tuple[np.ndarray, AttentionParams]:
    """Gradients of ``<grad_out, attention_forward(x)>`` w.r.t. x and each weight matrix."""
    x = np.asarray(x, dtype=np.float64)
    gout = np.asarray(grad_out, dtype=np.float64)
    a = params.W_theta @ x
    b = params.W_phi @ x
    g = params.W_g @ x
    A = softmax_rows(np.outer(a, b))
    y = A @ g

    gW_alpha = np.outer(gout, y)
    gy = params.W_alpha.T @ gout
    gA = np.outer(gy, g)
    gg = A.T @ gy
    # softmax Jacobian, row by row
    gS = A * (gA - (gA * A).sum(axis=1, keepdims=True))
    ga = gS @ b
    gb = gS.T @ a
    gx = gout + params.W_theta.T @ ga + params.W_phi.T @ gb + params.W_g.T @ gg
    grads = AttentionParams.__new__(AttentionParams)
    grads.W_theta, grads.W_phi, grads.W_g, grads.W_alpha = np.outer(ga, x), np.outer(gb, x), np.outer(gg, x), gW_alpha
    return gx, grads


def attention_backward_check(x, params: AttentionParams, perturbation: float = 1e-5,
                             probe=None, seed: int = 0) -> float:
    """Max relative discrepancy between analytic and central-difference gradients.

    The scalar being differentiated is ``<probe, out>``; by default a fixed
    random linear probe. Discrepancy for each tensor is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)``
    and the worst tensor is reported.
    """
    if not 1e-7 <= perturbation <= 1e-3:
        raise ValueError("perturbation must lie in [1e-7, 1e-3]")
    x = np.asarray(x, dtype=np.float64)
    if probe is None:
        probe = np.random.default_rng(seed).standard_normal(params.C)
    probe = np.asarray(probe, dtype=np.float64)

    def f(xv, pv):
        return float(probe @ attention_forward(xv, pv)[0])

    gx, gp = attention_vjp(x, params, probe)
    h = perturbation

    def numeric(arr, evaluate):
        out = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = evaluate()
            arr[idx] = orig - h
            fm = evaluate()
            arr[idx] = orig
            out[idx] = (fp - fm) / (2 * h)
        return out

    xw = x.copy()
    pw = AttentionParams(*(m.copy() for m in params.as_tuple()))
    pairs = [(gx, numeric(xw, lambda: f(xw, pw)))]
    for name in PARAM_NAMES:
        pairs.append((getattr(gp, name), numeric(getattr(pw, name), lambda: f(xw, pw))))
    worst = 0.0
    for an, nu in pairs:
        scale = max(np.abs(an).max(), np.abs(nu).max(), 1e-12)
        worst = max(worst, float(np.abs(an - nu).max() / scale))
    return worst


class SelfAttention(nn.Module):
    """Torch layer: ``Att(x) = W_alpha softmax_rows(theta(x) phi(x)^T) g(x) + x`` for x of shape (B, C)."""

    def __init__(self, C: int, n: int = 8):
        super().__init__()
        d = embed_dim(C, n)
        self.C, self.n, self.d = C, n, d
        self.theta = nn.Linear(C, d, bias=False)
        self.phi = nn.Linear(C, d, bias=False)
        self.g = nn.Linear(C, d, bias=False)
        self.alpha = nn.Linear(d, C, bias=False)
        # nn.Linear's default init is already uniform in +-1/sqrt(fan_in)
        for m in (self.theta, self.phi, self.g, self.alpha):
            bound = 1 / math.sqrt(m.in_features)
            nn.init.uniform_(m.weight, -bound, bound)

    def forward(self, x: torch.Tensor, return_trace: bool = False):
        if x.shape[-1] != self.C:
            raise ConfigurationError(f"feature size {x.shape[-1]} does not match attention size {self.C}")
        a, b, g = self.theta(x), self.phi(x), self.g(x)
        S = a.unsqueeze(-1) * b.unsqueeze(-2)
        A = torch.softmax(S, dim=-1)
        y = (A @ g.unsqueeze(-1)).squeeze(-1)
        out = self.alpha(y) + x
        if return_trace:
            return out, (S, A, y)
        return out

    def get_params(self) -> AttentionParams:
        return AttentionParams(*(m.weight.detach().double().cpu().numpy().copy()
                                 for m in (self.theta, self.phi, self.g, self.alpha)))

    @torch.no_grad()
    def set_params(self, params: AttentionParams):
        if params.C != self.C or params.d != self.d:
            raise ConfigurationError(f"params are for C={params.C}, d={params.d}; layer has C={self.C}, d={self.d}")
        for m, w in zip((self.theta, self.phi, self.g, self.alpha), params.as_tuple()):
            m.weight.copy_(torch.as_tensor(w, dtype=m.weight.dtype))

"""Encoder -> self-attention -> pose regressor network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import SelfAttention, embed_dim
from .errors import ConfigurationError, InputShapeError
from .geometry import quat_exp_t

BACKBONES = ("residual-34", "tiny-residual")


@dataclass
class EncoderConfig:
    backbone: str = "residual-34"
    feature_dim: int = 2048
    pretrained: bool = False
    dropout_rate: float = 0.5
    attention_ratio: int = 8
    use_attention: bool = True
    input_size: int = 256
    width: int = 32  # tiny-residual base channel count

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.feature_dim < 2 or self.feature_dim % 2:
            raise ConfigurationError("feature_dim must be a positive even integer")
        embed_dim(self.feature_dim, self.attention_ratio)


class PoseOutput(NamedTuple):
    p: torch.Tensor  # (B, 3) meters
    logq: torch.Tensor  # (B, 3)
    q: torch.Tensor  # (B, 4) canonical unit quaternion


def _norm(ch: int) -> nn.Module:
    return nn.GroupNorm(min(8, ch), ch)


class _Block(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = _norm(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        return F.relu(out + (x if self.skip is None else self.skip(x)))


class TinyResidual(nn.Module):
    """Stem conv + three two-conv residual stages + C-dim linear layer (8 weight layers)."""

    def __init__(self, feature_dim: int, width: int = 32):
        super().__init__()
        w = width
        self.stem = nn.Sequential(nn.Conv2d(3, w, 3, 2, 1, bias=False), _norm(w), nn.ReLU(inplace=True))
        self.layers = nn.Sequential(_Block(w, w, 1), _Block(w, 2 * w, 2), _Block(2 * w, 4 * w, 2))
        self.fc = nn.Linear(4 * w, feature_dim)

    def forward(self, x):
        x = self.layers(self.stem(x))
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


def _resnet34(feature_dim: int, pretrained: bool) -> nn.Module:
    from torchvision.models import ResNet34_Weights, resnet34

    net = resnet34(weights=ResNet34_Weights.IMAGENET1K_V1 if pretrained else None)
    net.avgpool = nn.AdaptiveAvgPool2d(1)
    net.fc = nn.Linear(net.fc.in_features, feature_dim)
    return net


class PoseRegressor(nn.Module):
    """Shared hidden layer (C/2, ReLU, dropout) feeding a position head and a log-quaternion head."""

    def __init__(self, feature_dim: int, dropout_rate: float = 0.5):
        super().__init__()
        self.hidden = nn.Linear(feature_dim, feature_dim // 2)
        self.dropout = nn.Dropout(dropout_rate)
        self.fc_xyz = nn.Linear(feature_dim // 2, 3)
        self.fc_logq = nn.Linear(feature_dim // 2, 3)

    def zero_heads(self):
        for m in (self.fc_xyz, self.fc_logq):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def forward(self, feats: torch.Tensor) -> PoseOutput:
        h = self.dropout(F.relu(self.hidden(feats)))
        p = self.fc_xyz(h)
        logq = self.fc_logq(h)
        return PoseOutput(p, logq, quat_exp_t(logq))


class PoseNetwork(nn.Module):
    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        cfg = cfg or EncoderConfig()
        self.cfg = cfg
        if cfg.backbone == "tiny-residual":
            self.encoder = TinyResidual(cfg.feature_dim, cfg.width)
        else:
            self.encoder = _resnet34(cfg.feature_dim, cfg.pretrained)
        self.attention = SelfAttention(cfg.feature_dim, cfg.attention_ratio) if cfg.use_attention else None
        self.regressor = PoseRegressor(cfg.feature_dim, cfg.dropout_rate)
        if not cfg.pretrained:
            for m in self.encoder.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        nn.init.kaiming_normal_(self.encoder.fc.weight)
        nn.init.zeros_(self.encoder.fc.bias)

    def check_input(self, images: torch.Tensor):
        s = self.cfg.input_size
        if images.ndim != 4 or images.shape[1] != 3 or tuple(images.shape[2:]) != (s, s):
            raise InputShapeError(f"expected images of shape (B, 3, {s}, {s}), got {tuple(images.shape)}")

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        self.check_input(images)
        return F.relu(self.encoder(images))

    def attend(self, feats: torch.Tensor, return_trace: bool = False):
        if self.attention is None:
            return (feats, None) if return_trace else feats
        return self.attention(feats, return_trace=return_trace)

    def regress_pose(self, feats: torch.Tensor) -> PoseOutput:
        return self.regressor(feats)

    def features(self, images: torch.Tensor, post_attention: bool = True) -> torch.Tensor:
        x = self.encode(images)
        return self.attend(x) if post_attention else x

    def forward(self, images: torch.Tensor, return_trace: bool = False):
        x = self.encode(images)
        att, trace = self.attend(x, return_trace=True)
        out = self.regress_pose(att)
        return (out, trace) if return_trace else out

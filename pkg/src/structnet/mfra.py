"""Multi-scale feature & residual aggregation (MFRA) and fusion variants.

Four atrous branches over [XW, B] (rates 1, 24, 12 and 6, the last stacked on
the rate-12 branch) are blended with per-pixel softmax weights predicted from
[XW, B]. Strided branches are upsampled (nearest) back to the fusion grid.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

DILATION_RATES = (1, 24, 12, 6)
BRANCH_STRIDES = (1, 1, 2, 2)
ENCODER_FILTERS = (64, 128, 256, 512, 512)
FUSION_KINDS = ("add", "mfra", "mfra_v1", "mfra_v2")


def effective_dilation(rate: int, size: int) -> int:
    """Clamp a 3x3 dilation so the dilated kernel fits in ``size`` pixels."""
    if size >= 2 * rate + 1:
        return rate
    return max(1, (size - 1) // 2)


class AtrousBranch(nn.Module):
    def __init__(self, in_channels, out_channels, rate, stride):
        super().__init__()
        self.rate = rate
        self.stride = stride
        self.conv = nn.Conv2d(in_channels, out_channels, 3)

    def forward(self, x):
        d = effective_dilation(self.rate, min(x.shape[-2:]))
        return F.relu(F.conv2d(x, self.conv.weight, self.conv.bias, stride=self.stride, padding=d, dilation=d))


def combine(branches: list[torch.Tensor], weights: torch.Tensor) -> torch.Tensor:
    """sum_s w_s * X_s with ``weights`` of shape N x S x H x W (shared over channels)."""
    out = weights[:, 0:1] * branches[0]
    for s in range(1, len(branches)):
        out = out + weights[:, s : s + 1] * branches[s]
    return out


class MFRA(nn.Module):
    """Fuses XW and B (both ``channels`` wide) into ``out_channels`` features.

    ``mode`` selects the full module ("mfra"), equal unit weights without the
    weight predictor ("mfra_v1"), or all four branches read from [XW, B]
    ("mfra_v2").
    """

    def __init__(self, channels: int, out_channels: int | None = None, mode: str = "mfra",
                 rates=DILATION_RATES, strides=BRANCH_STRIDES):
        super().__init__()
        if mode not in ("mfra", "mfra_v1", "mfra_v2"):
            raise ConfigError(f"unknown MFRA mode {mode!r}")
        if len(rates) != 4 or len(strides) != 4:
            raise ConfigError("MFRA needs exactly four branches")
        out_channels = out_channels or channels
        self.mode = mode
        cat = 2 * channels
        self.branches = nn.ModuleList(
            [AtrousBranch(cat, out_channels, r, s) for r, s in zip(rates[:3], strides[:3])]
        )
        last_in = cat if mode == "mfra_v2" else out_channels
        self.branches.append(AtrousBranch(last_in, out_channels, rates[3], strides[3]))
        if mode != "mfra_v1":
            self.phi = nn.Sequential(
                nn.Conv2d(cat, channels, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(channels, len(self.branches), 3, padding=1),
            )

    def branch_features(self, xw: torch.Tensor, b: torch.Tensor) -> list[torch.Tensor]:
        x = torch.cat([xw, b], dim=1)
        x1, x24, x12 = (branch(x) for branch in self.branches[:3])
        x6 = self.branches[3](x if self.mode == "mfra_v2" else x12)
        size = xw.shape[-2:]
        return [t if t.shape[-2:] == size else F.interpolate(t, size=size, mode="nearest") for t in (x1, x24, x12, x6)]

    def fusion_weights(self, xw: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.phi(torch.cat([xw, b], dim=1)), dim=1)

    def forward(self, xw, b, weights: torch.Tensor | None = None):
        if xw.shape != b.shape:
            raise ShapeError(f"XW {tuple(xw.shape)} and B {tuple(b.shape)} are not aligned")
        branches = self.branch_features(xw, b)
        if self.mode == "mfra_v1" and weights is None:
            out = branches[0]
            for t in branches[1:]:
                out = out + t
            return out
        if weights is None:
            weights = self.fusion_weights(xw, b)
        self.last_weights = weights.detach()
        return combine(branches, weights)


def mfra_fuse(xw, b, module: MFRA, weights=None):
    return module(xw, b, weights)


class AddFusion(nn.Module):
    def forward(self, xw, b):
        if xw.shape != b.shape:
            raise ShapeError(f"XW {tuple(xw.shape)} and B {tuple(b.shape)} are not aligned")
        return xw + b


def make_fusion(kind: str, channels: int) -> nn.Module:
    if kind == "add":
        return AddFusion()
    if kind in ("mfra", "mfra_v1", "mfra_v2"):
        return MFRA(channels, mode=kind)
    raise ConfigError(f"unknown fusion kind {kind!r}; expected one of {', '.join(FUSION_KINDS)}")


def fuse_variant(kind: str, xw, b, module: nn.Module | None = None):
    """Apply fusion ``kind``; ``module`` carries parameters for the MFRA kinds."""
    if kind == "add":
        return xw + b
    if kind not in FUSION_KINDS:
        raise ConfigError(f"unknown fusion kind {kind!r}")
    if module is None or getattr(module, "mode", None) != kind:
        raise ConfigError(f"fusion {kind!r} needs a matching MFRA module")
    return module(xw, b)

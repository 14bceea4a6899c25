"""Mask-guided shadow-free extraction (MSFE) and the bridge ablation variants.

The bridge carries a shifting tensor B through the encoder. At each layer it
convolves the previous shift with a kernel predicted from the layer input,
reading only non-shadow positions and renormalizing by how many of them fall
inside the window. A fixed all-ones convolution propagates the shadow mask
alongside.

Tensors are NCHW; masks are N x 1 x H x W with values in {0, 1}.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

ENCODER_KERNELS = (7, 5, 3, 3, 3)
BRIDGE_KINDS = ("msfe", "conv_skip", "partial", "gated")


def same_padding(kernel_size: int) -> int:
    return (kernel_size - 1) // 2


def _check_aligned(x: torch.Tensor, mask: torch.Tensor) -> None:
    if x.dim() != 4 or mask.dim() != 4 or mask.shape[1] != 1:
        raise ShapeError(f"expected NCHW features and N1HW mask, got {tuple(x.shape)} / {tuple(mask.shape)}")
    if x.shape[0] != mask.shape[0] or x.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(f"features {tuple(x.shape)} and mask {tuple(mask.shape)} are not aligned")


def _window_count(valid: torch.Tensor, kernel_size: int, stride: int, padding: int) -> torch.Tensor:
    ones = valid.new_ones(1, 1, kernel_size, kernel_size)
    return F.conv2d(valid, ones, stride=stride, padding=padding)


def _safe_divide(num: torch.Tensor, count: torch.Tensor) -> torch.Tensor:
    nonzero = count > 0
    return torch.where(nonzero, num / torch.where(nonzero, count, torch.ones_like(count)), torch.zeros_like(num))


def bridge_msfe(
    b_prev: torch.Tensor,
    m_in: torch.Tensor,
    weight: torch.Tensor,
    stride: int = 1,
    padding: int | None = None,
    per_sample: bool = False,
    literal_alpha: bool = False,
) -> torch.Tensor:
    """Mask-normalized bridge convolution.

    B[p] = alpha_p * sum_q B_prev[q] (1 - M[q]) W[q - p], where alpha_p is one
    over the number of non-shadow positions in the window (zero output where
    there are none). ``weight`` is a shared (C_out, C_in, K, K) kernel, or a
    per-sample depthwise (N, C, K, K) kernel when ``per_sample`` is set.
    ``literal_alpha`` normalizes by the shadow count instead.
    """
    _check_aligned(b_prev, m_in)
    k = weight.shape[-1]
    if weight.shape[-2] != k:
        raise ShapeError(f"kernel must be square, got {tuple(weight.shape)}")
    pad = same_padding(k) if padding is None else padding
    n, c, h, w = b_prev.shape
    nonshadow = 1.0 - m_in
    masked = b_prev * nonshadow
    if per_sample:
        if weight.shape[:2] != (n, c):
            raise ShapeError(f"per-sample kernel {tuple(weight.shape)} does not match input {tuple(b_prev.shape)}")
        num = F.conv2d(
            masked.reshape(1, n * c, h, w), weight.reshape(n * c, 1, k, k), stride=stride, padding=pad, groups=n * c
        )
        num = num.reshape(n, c, num.shape[-2], num.shape[-1])
    else:
        if weight.shape[1] != c:
            raise ShapeError(f"kernel expects {weight.shape[1]} channels, input has {c}")
        num = F.conv2d(masked, weight, stride=stride, padding=pad)
    count = _window_count(m_in if literal_alpha else nonshadow, k, stride, pad)
    return _safe_divide(num, count)


def propagate_mask(mask: torch.Tensor, kernel_size: int, stride: int = 2) -> torch.Tensor:
    """Convolve with an all-ones kernel and mark every window touching shadow."""
    count = _window_count(mask, kernel_size, stride, same_padding(kernel_size))
    return (count > 0).to(mask.dtype)


def conv_skip(b_prev: torch.Tensor, weight: torch.Tensor, bias=None, stride: int = 1, padding: int | None = None):
    pad = same_padding(weight.shape[-1]) if padding is None else padding
    return F.conv2d(b_prev, weight, bias, stride=stride, padding=pad)


def partial_conv(x_in, m_in, weight, stride: int = 1, padding: int | None = None):
    return bridge_msfe(x_in, m_in, weight, stride=stride, padding=padding)


def gated_conv(x_in, weight, gate_weight, stride: int = 1, padding: int | None = None, bias=None, gate_bias=None):
    pad = same_padding(weight.shape[-1]) if padding is None else padding
    feat = F.conv2d(x_in, weight, bias, stride=stride, padding=pad)
    gate = torch.sigmoid(F.conv2d(x_in, gate_weight, gate_bias, stride=stride, padding=pad))
    return gate * feat


def bridge_variant(kind: str, x_in, b_prev, m_in, params: dict, stride: int = 1, padding: int | None = None):
    """Functional form of the ablation bridges.

    conv_skip returns B (fused additively by the caller); partial and gated
    return the layer output X_out directly.
    """
    if kind == "conv_skip":
        return conv_skip(b_prev, params["weight"], params.get("bias"), stride, padding)
    if kind == "partial":
        return partial_conv(x_in, m_in, params["weight"], stride, padding)
    if kind == "gated":
        return gated_conv(
            x_in, params["weight"], params["gate_weight"], stride, padding, params.get("bias"), params.get("gate_bias")
        )
    raise ConfigError(f"unknown bridge kind {kind!r}; expected one of conv_skip, partial, gated")


class KernelPredictor(nn.Module):
    """Predicts a per-sample K x K depthwise kernel from the layer input.

    conv(K, stride 2) -> ReLU -> 1x1 conv -> global spatial mean -> reshape.
    """

    def __init__(self, in_channels: int, kernel_channels: int, kernel_size: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(kernel_channels, 16)
        self.in_channels = in_channels
        self.kernel_channels = kernel_channels
        self.kernel_size = kernel_size
        self.conv1 = nn.Conv2d(in_channels, hidden, kernel_size, stride=2, padding=same_padding(kernel_size))
        self.conv2 = nn.Conv2d(hidden, kernel_channels * kernel_size * kernel_size, 1)

    def forward(self, x_in: torch.Tensor) -> torch.Tensor:
        if x_in.shape[1] != self.in_channels:
            raise ShapeError(f"kernel predictor expects {self.in_channels} channels, got {x_in.shape[1]}")
        h = self.conv2(F.relu(self.conv1(x_in)))
        k = self.kernel_size
        return h.mean(dim=(2, 3)).view(x_in.shape[0], self.kernel_channels, k, k)


def predict_kernel_eta(x_in: torch.Tensor, predictor: KernelPredictor) -> torch.Tensor:
    return predictor(x_in)


class MSFEBridge(nn.Module):
    """Second-branch layer: dynamic masked bridge, 1x1 projection, BN, ReLU."""

    kind = "msfe"

    def __init__(self, x_channels, b_channels, out_channels, kernel_size, stride=2, norm=True, literal_alpha=False):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride
        self.literal_alpha = literal_alpha
        self.eta = KernelPredictor(x_channels, b_channels, kernel_size)
        self.project = nn.Conv2d(b_channels, out_channels, 1)
        self.norm = nn.BatchNorm2d(out_channels) if norm else nn.Identity()

    def forward(self, x_in, b_prev, m_in):
        kernel = self.eta(x_in)
        b = bridge_msfe(b_prev, m_in, kernel, self.stride, per_sample=True, literal_alpha=self.literal_alpha)
        return F.relu(self.norm(self.project(b)))


class ConvSkipBridge(nn.Module):
    kind = "conv_skip"

    def __init__(self, x_channels, b_channels, out_channels, kernel_size, stride=2, norm=True):
        super().__init__()
        self.conv = nn.Conv2d(b_channels, out_channels, kernel_size, stride, same_padding(kernel_size))
        self.norm = nn.BatchNorm2d(out_channels) if norm else nn.Identity()

    def forward(self, x_in, b_prev, m_in):
        return F.relu(self.norm(self.conv(b_prev)))


class PartialBridge(nn.Module):
    """X_out = mask-normalized convolution of X_in over non-shadow positions."""

    kind = "partial"

    def __init__(self, x_channels, out_channels, kernel_size, stride=2):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(out_channels, x_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x_in, m_in):
        out = partial_conv(x_in, m_in, self.weight, self.stride)
        return out + self.bias.view(1, -1, 1, 1)


class GatedBridge(nn.Module):
    """X_out = sigmoid(X_in * W_f) * (X_in * W); W is the layer's main conv."""

    kind = "gated"

    def __init__(self, x_channels, out_channels, kernel_size, stride, padding):
        super().__init__()
        self.gate = nn.Conv2d(x_channels, out_channels, kernel_size, stride, padding)

    def forward(self, x_in, xw):
        return torch.sigmoid(self.gate(x_in)) * xw

"""UNet baseline, StructNet stage 1 / stage 2 and MStructNet.

All models share one encoder layer type: a main convolution X_in * W
optionally paired with a bridge (the second branch carrying the shift B) and
a fusion; masks travel alongside through the third branch.
"""
from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .mfra import ENCODER_FILTERS, FUSION_KINDS, make_fusion
from .msfe import (
    BRIDGE_KINDS,
    ENCODER_KERNELS,
    ConvSkipBridge,
    GatedBridge,
    MSFEBridge,
    PartialBridge,
    propagate_mask,
)
from .structure_rtv import CANONICAL_LEVELS

SIZE_MULTIPLE = 32


@dataclass(frozen=True)
class UNetSpec:
    filters: tuple[int, ...] = ENCODER_FILTERS
    kernel_size: int = 4
    stride: int = 2
    padding: int = 1
    leaky_slope: float = 0.2


@dataclass(frozen=True)
class ModelVariant:
    """Which encoder layers (1-based) carry a bridge, and how it is fused.

    ``bridge="none"`` gives the plain UNet. For ``partial`` and ``gated`` the
    bridge replaces the layer output and ``fusion`` is ignored.
    """

    bridge: str = "msfe"
    fusion: str = "mfra"
    layers: tuple[int, ...] = (1, 2, 3, 4, 5)
    literal_alpha: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(sorted(set(int(j) for j in self.layers))))
        if self.bridge != "none" and self.bridge not in BRIDGE_KINDS:
            raise ConfigError(f"unknown bridge kind {self.bridge!r}")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion kind {self.fusion!r}")
        if any(j < 1 or j > 5 for j in self.layers):
            raise ConfigError(f"layer indices must lie in 1..5, got {self.layers}")
        if self.bridge != "none" and not self.layers:
            raise ConfigError("a bridge needs at least one equipped layer")

    @classmethod
    def none(cls) -> "ModelVariant":
        return cls(bridge="none", fusion="add", layers=())

    @property
    def chained(self) -> bool:
        return self.bridge in ("msfe", "conv_skip")

    def name(self) -> str:
        if self.bridge == "none":
            return "UNet"
        layers = "(1..5)" if self.layers == (1, 2, 3, 4, 5) else ",".join(map(str, self.layers))
        if self.chained:
            return f"StructNet({self.bridge.upper()},{layers},{self.fusion})"
        return f"StructNet({self.bridge},{layers})"


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, PartialBridge):
            nn.init.normal_(m.weight, 0.0, 0.02)
            nn.init.zeros_(m.bias)


def check_size(x: torch.Tensor) -> None:
    h, w = x.shape[-2:]
    if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
        raise ShapeError(f"spatial size {h}x{w} is not a multiple of {SIZE_MULTIPLE}")


class EncoderLayer(nn.Module):
    """X_out = act(norm(Fusion(X_in * W, B))), with B from an optional bridge."""

    def __init__(self, in_ch, out_ch, *, kernel_size=4, stride=2, padding=1, norm=True, slope=0.2,
                 bridge="none", fusion="add", bridge_kernel=3, b_channels=None, fuse=False,
                 literal_alpha=False):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride, padding)
        self.norm = nn.InstanceNorm2d(out_ch) if norm else nn.Identity()
        self.slope = slope
        self.bridge_kind = bridge
        self.fuse = fuse
        self.mask_kernel = bridge_kernel
        self.mask_stride = stride
        self.record = False
        self.features: dict[str, torch.Tensor] = {}
        if bridge == "msfe":
            self.bridge = MSFEBridge(in_ch, b_channels, out_ch, bridge_kernel, stride, norm=norm,
                                     literal_alpha=literal_alpha)
        elif bridge == "conv_skip":
            self.bridge = ConvSkipBridge(in_ch, b_channels, out_ch, bridge_kernel, stride, norm=norm)
        elif bridge == "partial":
            self.bridge = PartialBridge(in_ch, out_ch, bridge_kernel, stride)
        elif bridge == "gated":
            self.bridge = GatedBridge(in_ch, out_ch, kernel_size, stride, padding)
        if fuse and bridge in ("msfe", "conv_skip"):
            self.fusion = make_fusion(fusion, out_ch)

    def activate(self, x):
        return F.leaky_relu(self.norm(x), self.slope) if self.slope else F.relu(self.norm(x))

    def forward(self, x, b_prev=None, m_in=None):
        kind = self.bridge_kind
        m_next = propagate_mask(m_in, self.mask_kernel, self.mask_stride) if m_in is not None else None
        if kind == "partial" and self.fuse:
            out = self.bridge(x, m_in)
            self._keep(out=out)
            return self.activate(out), None, m_next
        xw = self.conv(x)
        if kind == "gated" and self.fuse:
            out = self.bridge(x, xw)
            self._keep(xw=xw, out=out)
            return self.activate(out), None, m_next
        b = self.bridge(x, b_prev, m_in) if kind in ("msfe", "conv_skip") else None
        out = self.fusion(xw, b) if self.fuse and b is not None else xw
        self._keep(xw=xw, b=b, out=out)
        return self.activate(out), b, m_next

    def _keep(self, **tensors):
        if self.record:
            self.features = {k: v.detach() for k, v in tensors.items() if v is not None}


class Decoder(nn.Module):
    """Five stride-2 transposed convolutions with skip concatenation, sigmoid head."""

    def __init__(self, filters: Sequence[int], skip_channels: Sequence[int] | None = None, out_channels=3):
        super().__init__()
        skip_channels = list(skip_channels or filters)
        outs = list(reversed(filters[:-1])) + [filters[0]]
        ins = [filters[-1]] + [o + s for o, s in zip(outs[:-1], reversed(skip_channels[:-1]))]
        self.layers = nn.ModuleList(nn.ConvTranspose2d(i, o, 4, 2, 1) for i, o in zip(ins, outs))
        self.norms = nn.ModuleList(nn.InstanceNorm2d(o) for o in outs)
        self.head = nn.Conv2d(outs[-1], out_channels, 3, padding=1)

    def forward(self, skips: list[torch.Tensor]):
        x = skips[-1]
        for i, (layer, norm) in enumerate(zip(self.layers, self.norms)):
            if i > 0:
                x = torch.cat([x, skips[-1 - i]], dim=1)
            x = F.relu(norm(layer(x)))
        return torch.sigmoid(self.head(x))


class UNet(nn.Module):
    """Encoder-decoder with optional shadow-aware encoder layers.

    With ``variant=ModelVariant.none()`` this is the plain baseline; any other
    variant adds the bridge / mask branches (StructNet stage 1 layout).
    """

    def __init__(self, in_channels: int, variant: ModelVariant | None = None, spec: UNetSpec = UNetSpec(),
                 b_channels: int = 3):
        super().__init__()
        variant = variant or ModelVariant.none()
        self.variant = variant
        self.spec = spec
        deepest = max(variant.layers) if variant.layers else 0
        layers = []
        c_in, c_b = in_channels, b_channels
        for j, c_out in enumerate(spec.filters, start=1):
            equipped = j in variant.layers
            if variant.chained:
                bridge = variant.bridge if j <= deepest else "none"
            else:
                bridge = variant.bridge if equipped else "none"
            layers.append(EncoderLayer(
                c_in, c_out, kernel_size=spec.kernel_size, stride=spec.stride, padding=spec.padding,
                norm=j < len(spec.filters), slope=spec.leaky_slope, bridge=bridge, fusion=variant.fusion,
                bridge_kernel=ENCODER_KERNELS[j - 1], b_channels=c_b, fuse=equipped,
                literal_alpha=variant.literal_alpha,
            ))
            c_in, c_b = c_out, c_out
        self.encoder = nn.ModuleList(layers)
        self.decoder = Decoder(spec.filters)
        init_weights(self)

    @property
    def needs_mask(self) -> bool:
        return self.variant.bridge != "none"

    def forward(self, x: torch.Tensor, b0: torch.Tensor | None = None, mask: torch.Tensor | None = None):
        check_size(x)
        if self.needs_mask and mask is None:
            raise ShapeError("this variant needs a shadow mask")
        if self.variant.chained and b0 is None:
            raise ShapeError("this variant needs the initial shift input B^0")
        skips, b, m = [], b0, mask
        for layer in self.encoder:
            x, b, m = layer(x, b, m)
            skips.append(x)
        return self.decoder(skips)


def vanilla_unet(in_channels: int, spec: UNetSpec = UNetSpec()) -> UNet:
    return UNet(in_channels, ModelVariant.none(), spec)


class StructNetStage1(nn.Module):
    """Structure-level removal: (S_l, M) -> S_hat_l. B^0 is S_l itself."""

    def __init__(self, variant: ModelVariant = ModelVariant(), spec: UNetSpec = UNetSpec()):
        super().__init__()
        self.net = UNet(4, variant, spec, b_channels=3)

    def forward(self, structure: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = torch.cat([structure, mask], dim=1)
        if self.net.needs_mask:
            return self.net(x, structure, mask)
        return self.net(x)


class Stage2Model(Protocol):
    """Image-level removal guided by a restored structure: (I, S_hat, M) -> I_hat."""

    def __call__(self, image: torch.Tensor, structure: torch.Tensor, mask: torch.Tensor) -> torch.Tensor: ...


class GuidedStage2(nn.Module):
    def __init__(self, spec: UNetSpec = UNetSpec()):
        super().__init__()
        self.net = vanilla_unet(7, spec)

    def forward(self, image, structure, mask):
        return self.net(torch.cat([image, structure, mask], dim=1))


def stage2_forward(model: Stage2Model, image, structure, mask):
    return model(image, structure, mask)


class StructureBlock(nn.Module):
    """Two shadow-aware layers over (I, S_l, M): stride 2 then stride 1."""

    def __init__(self, channels: int = 64, fusion: str = "mfra"):
        super().__init__()
        self.layer1 = EncoderLayer(7, channels, kernel_size=4, stride=2, padding=1, bridge="msfe", fusion=fusion,
                                   bridge_kernel=ENCODER_KERNELS[0], b_channels=3, fuse=True)
        self.layer2 = EncoderLayer(channels, channels, kernel_size=3, stride=1, padding=1, bridge="msfe",
                                   fusion=fusion, bridge_kernel=ENCODER_KERNELS[1], b_channels=channels, fuse=True)

    def forward(self, image, structure, mask):
        x = torch.cat([image, structure, mask], dim=1)
        x1, b1, m1 = self.layer1(x, structure, mask)
        x2, _, _ = self.layer2(x1, b1, m1)
        return x1, x2


def level_key(level: float) -> str:
    return f"{level:g}".replace(".", "_")


class MStructNet(nn.Module):
    """Single-pass removal from the shadow image and several structure levels.

    Per-level block outputs are summed; the sum of second-layer features runs
    through the remaining standard encoder layers, and the final decoder skip
    receives both summed feature sets.
    """

    def __init__(self, levels: Sequence[float] = CANONICAL_LEVELS, spec: UNetSpec = UNetSpec(), fusion: str = "mfra"):
        super().__init__()
        if not levels:
            raise ConfigError("MStructNet needs at least one structure level")
        self.levels = tuple(sorted(float(lv) for lv in levels))
        c0 = spec.filters[0]
        self.blocks = nn.ModuleDict({level_key(lv): StructureBlock(c0, fusion) for lv in self.levels})
        rest = []
        c_in = c0
        for j, c_out in enumerate(spec.filters[1:], start=2):
            rest.append(EncoderLayer(c_in, c_out, kernel_size=spec.kernel_size, stride=spec.stride,
                                     padding=spec.padding, norm=j < len(spec.filters), slope=spec.leaky_slope))
            c_in = c_out
        self.encoder = nn.ModuleList(rest)
        self.decoder = Decoder(spec.filters, skip_channels=[2 * c0, *spec.filters[1:]])
        init_weights(self)

    def forward(self, image: torch.Tensor, structures: Mapping[float, torch.Tensor] | Sequence[torch.Tensor],
                mask: torch.Tensor):
        check_size(image)
        if not isinstance(structures, Mapping):
            if len(structures) != len(self.levels):
                raise ConfigError(f"expected {len(self.levels)} structures, got {len(structures)}")
            structures = dict(zip(self.levels, structures))
        if set(float(k) for k in structures) != set(self.levels):
            raise ConfigError(f"structure levels {sorted(structures)} do not match model levels {self.levels}")
        structures = {float(k): v for k, v in structures.items()}
        x1 = x2 = None
        for lv in self.levels:
            f1, f2 = self.blocks[level_key(lv)](image, structures[lv], mask)
            x1 = f1 if x1 is None else x1 + f1
            x2 = f2 if x2 is None else x2 + f2
        skips = [torch.cat([x1, x2], dim=1)]
        x = x2
        for layer in self.encoder:
            x, _, _ = layer(x)
            skips.append(x)
        return self.decoder(skips)


def set_recording(model: nn.Module, on: bool = True) -> list[tuple[str, EncoderLayer]]:
    layers = [(name, m) for name, m in model.named_modules() if isinstance(m, EncoderLayer)]
    for _, m in layers:
        m.record = on
        m.features = {}
    return layers

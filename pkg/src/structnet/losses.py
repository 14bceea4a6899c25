"""L1 + perceptual training objective."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

BACKBONES = ("pretrained-vgg16", "surrogate")
LAMBDA2_GRID = (0.01, 0.1, 1.0, 10.0)


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    backbone: str = "pretrained-vgg16"
    allow_surrogate: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown perceptual backbone {self.backbone!r}; expected one of {BACKBONES}")


def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_pair(pred, target)
    return (pred - target).abs().mean()


class SurrogateBackbone(nn.Module):
    """Frozen 3-stage (conv3x3, ReLU, maxpool) feature extractor seeded at 0."""

    def __init__(self, widths=(16, 32, 64), seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            stages, c = [], 3
            for w in widths:
                stages.append(nn.Sequential(nn.Conv2d(c, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)))
                c = w
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class VGG16Backbone(nn.Module):
    """Activations after the first three max-pool layers of ImageNet VGG16."""

    _POOLS = (4, 9, 16)

    def __init__(self):
        super().__init__()
        from torchvision.models import VGG16_Weights, vgg16

        features = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features[: self._POOLS[-1] + 1]
        self.features = features.requires_grad_(False).eval()
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        x = (x - self.mean) / self.std
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self._POOLS:
                feats.append(x)
        return feats


_BACKBONE_CACHE: dict[str, nn.Module] = {}


def make_backbone(config: LossConfig) -> nn.Module:
    if config.backbone == "surrogate":
        return SurrogateBackbone()
    if "vgg16" not in _BACKBONE_CACHE:
        try:
            _BACKBONE_CACHE["vgg16"] = VGG16Backbone()
        except Exception as exc:  # download or import failure
            if not config.allow_surrogate:
                raise ConfigError(f"pretrained VGG16 unavailable ({exc}) and surrogate disallowed") from exc
            log.warning("pretrained VGG16 unavailable (%s); using the surrogate backbone", exc)
            return SurrogateBackbone()
    return _BACKBONE_CACHE["vgg16"]


def perceptual_loss(pred, target, config: LossConfig = LossConfig(), backbone: nn.Module | None = None):
    _check_pair(pred, target)
    backbone = backbone if backbone is not None else make_backbone(config)
    total = pred.new_zeros(())
    for fp, ft in zip(backbone(pred), backbone(target)):
        total = total + F.l1_loss(fp, ft)
    return total


class TotalLoss(nn.Module):
    """lambda1 * L1 + lambda2 * perceptual, with the backbone built once."""

    def __init__(self, config: LossConfig = LossConfig()):
        super().__init__()
        self.config = config
        self.backbone = make_backbone(config) if config.lambda2 > 0 else None

    def forward(self, pred, target):
        loss = self.config.lambda1 * l1_loss(pred, target)
        if self.backbone is not None:
            loss = loss + self.config.lambda2 * perceptual_loss(pred, target, self.config, self.backbone)
        return loss


def total_loss(pred, target, config: LossConfig = LossConfig(), backbone: nn.Module | None = None):
    loss = config.lambda1 * l1_loss(pred, target)
    if config.lambda2 == 0:
        return loss
    return loss + config.lambda2 * perceptual_loss(pred, target, config, backbone)

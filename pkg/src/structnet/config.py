"""Training configuration: YAML files with dotted ``key=value`` overrides."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .datasets import SyntheticShadowSpec
from .errors import ConfigError
from .losses import LossConfig
from .mfra import ENCODER_FILTERS
from .models import ModelVariant, UNetSpec
from .structure_rtv import CANONICAL_LEVELS, MAX_LEVEL

MODEL_KINDS = ("unet", "structnet_stage1", "structnet_stage2", "mstructnet")
GUIDANCE = ("stage1", "gt_structure", "shadow_structure")
DEFAULT_LEVEL = 0.015


@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | istd | srd
    root: str | None = None
    split: str = "train"
    size: int = 64
    count: int = 64
    seed: int = 0
    attenuation: tuple[float, float] = (0.3, 0.8)
    coverage: tuple[float, float] = (0.05, 0.4)
    softness: float = 1.0
    texture: float = 0.04

    def synthetic_spec(self, seed: int | None = None) -> SyntheticShadowSpec:
        return SyntheticShadowSpec(self.size, tuple(self.attenuation), tuple(self.coverage), self.softness,
                                   self.texture, self.seed if seed is None else seed)


@dataclass
class TrainConfig:
    model: str = "mstructnet"
    seed: int | None = None
    steps: int = 1000
    batch_size: int = 4
    levels: list[float] | None = None
    variant: ModelVariant = field(default_factory=ModelVariant)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    filters: tuple[int, ...] = ENCODER_FILTERS
    checkpoint_interval: int = 500
    log_interval: int = 10
    stage1_checkpoint: str | None = None
    guidance: str = "stage1"
    data: DataConfig = field(default_factory=DataConfig)
    cache_dir: str | None = None
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.levels is None:
            self.levels = list(CANONICAL_LEVELS) if self.model == "mstructnet" else [DEFAULT_LEVEL]
        self.validate()

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODEL_KINDS}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if not self.levels:
            raise ConfigError("at least one structure level is required")
        if any(lv < 0 or lv > MAX_LEVEL for lv in self.levels):
            raise ConfigError(f"structure levels must lie in [0, {MAX_LEVEL}], got {self.levels}")
        if self.model in ("unet", "structnet_stage1", "structnet_stage2") and len(self.levels) != 1:
            raise ConfigError(f"{self.model} takes exactly one structure level")
        if self.model == "mstructnet" and 0.0 in self.levels:
            raise ConfigError("mstructnet levels must be > 0")
        if self.guidance not in GUIDANCE:
            raise ConfigError(f"unknown guidance {self.guidance!r}; expected one of {GUIDANCE}")
        if self.model == "structnet_stage2" and self.guidance == "stage1" and not self.stage1_checkpoint:
            raise ConfigError("structnet_stage2 training needs a frozen stage-1 checkpoint (stage1_checkpoint)")
        if self.lr <= 0 or len(self.betas) != 2:
            raise ConfigError("invalid optimizer settings")
        if self.data.kind not in ("synthetic", "istd", "srd"):
            raise ConfigError(f"unknown data kind {self.data.kind!r}")
        if self.data.kind != "synthetic" and not self.data.root:
            raise ConfigError(f"data.root is required for {self.data.kind} data")
        if len(self.filters) != 5 or any(f < 1 for f in self.filters):
            raise ConfigError(f"filters must list five positive widths, got {self.filters}")
        if self.data.size % 32:
            raise ConfigError(f"data.size must be a multiple of 32, got {self.data.size}")

    @property
    def level(self) -> float:
        return float(self.levels[0])

    @property
    def unet_spec(self) -> UNetSpec:
        return UNetSpec(filters=tuple(self.filters))

    def to_dict(self) -> dict:
        d = {
            "model": self.model,
            "seed": self.seed,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "levels": [float(lv) for lv in self.levels],
            "variant": {"bridge": self.variant.bridge, "fusion": self.variant.fusion,
                        "layers": list(self.variant.layers), "literal_alpha": self.variant.literal_alpha},
            "loss": {"lambda1": self.loss.lambda1, "lambda2": self.loss.lambda2},
            "perceptual": {"backbone": self.loss.backbone, "allow_surrogate": self.loss.allow_surrogate},
            "optimizer": {"lr": self.lr, "beta1": self.betas[0], "beta2": self.betas[1]},
            "filters": list(self.filters),
            "checkpoint_interval": self.checkpoint_interval,
            "log_interval": self.log_interval,
            "stage1_checkpoint": self.stage1_checkpoint,
            "guidance": self.guidance,
            "data": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.data).items()},
            "cache": {"dir": self.cache_dir},
            "out_dir": self.out_dir,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = copy.deepcopy(d or {})
        known = {"model", "seed", "steps", "batch_size", "levels", "variant", "loss", "perceptual", "optimizer",
                 "filters", "checkpoint_interval", "log_interval", "stage1_checkpoint", "guidance", "data",
                 "cache", "out_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            variant = ModelVariant(**d.pop("variant", {}))
            loss_d = d.pop("loss", {}) or {}
            perc = d.pop("perceptual", {}) or {}
            loss = LossConfig(lambda1=float(loss_d.get("lambda1", 1.0)), lambda2=float(loss_d.get("lambda2", 0.1)),
                              backbone=perc.get("backbone", "pretrained-vgg16"),
                              allow_surrogate=bool(perc.get("allow_surrogate", True)))
            opt = d.pop("optimizer", {}) or {}
            data_d = d.pop("data", {}) or {}
            data_fields = {f.name for f in fields(DataConfig)}
            if set(data_d) - data_fields:
                raise ConfigError(f"unknown data keys: {sorted(set(data_d) - data_fields)}")
            for key in ("attenuation", "coverage"):
                if key in data_d:
                    data_d[key] = tuple(float(v) for v in data_d[key])
            cache = d.pop("cache", {}) or {}
            if "levels" in d:
                d["levels"] = [float(lv) for lv in d["levels"]]
            if "filters" in d:
                d["filters"] = tuple(int(f) for f in d["filters"])
            return cls(
                variant=variant, loss=loss, data=DataConfig(**data_d), cache_dir=cache.get("dir"),
                lr=float(opt.get("lr", 2e-4)), betas=(float(opt.get("beta1", 0.5)), float(opt.get("beta2", 0.999))),
                **d,
            )
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc


def parse_value(text: str) -> Any:
    return yaml.safe_load(text)


def set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def apply_overrides(d: dict, overrides: list[str] | None) -> dict:
    d = copy.deepcopy(d)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.sub=value")
        key, text = item.split("=", 1)
        set_dotted(d, key.strip(), parse_value(text))
    return d


def load_config_dict(path: str | Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        loaded = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if loaded is not None and not isinstance(loaded, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return loaded or {}


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> TrainConfig:
    return TrainConfig.from_dict(apply_overrides(load_config_dict(path), overrides))


def dump_config(config: TrainConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)

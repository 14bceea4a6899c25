"""Experiment recipes: a base config plus grids of dotted-key factor values.

A recipe file looks like::

    name: table6_fusion
    table: VI
    base: {model: structnet_stage1, seed: 0, ...}
    grids:
      - product:
          variant.fusion: [add, mfra_v1, mfra_v2, mfra]
      - zip:
          levels: [[0.0], [0.015]]
          out_dir: [runs/a, runs/b]

Each ``product`` block contributes the cartesian product of its axes, each
``zip`` block its axes in lockstep. ``{index}`` in string values is replaced
by the configuration's position in the recipe.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .config import TrainConfig, apply_overrides, set_dotted
from .errors import ConfigError, StructNetError
from .losses import LAMBDA2_GRID
from .structure_rtv import CANONICAL_LEVELS

ALL_LAYERS = (1, 2, 3, 4, 5)
STUDY_LEVELS = (0.0, *CANONICAL_LEVELS)


def _variant_key(cfg: TrainConfig):
    v = cfg.variant
    return (v.bridge, v.fusion if v.chained else None, v.layers)


# Factor sets of the published ablation grids, keyed by table numeral.
TABLE_FACTORS: dict[str, tuple[Any, set]] = {
    "I": (lambda c: (c.model, c.level),
          {(m, lv) for m in ("unet", "structnet_stage2") for lv in STUDY_LEVELS}),
    "IV": (_variant_key,
           {("msfe", f, (j,)) for f in ("add", "mfra") for j in ALL_LAYERS}
           | {("msfe", f, ALL_LAYERS) for f in ("add", "mfra")}),
    "V": (_variant_key,
          {("conv_skip", "add", ALL_LAYERS), ("partial", None, ALL_LAYERS), ("gated", None, ALL_LAYERS),
           ("msfe", "mfra", ALL_LAYERS)}),
    "VI": (_variant_key, {("msfe", f, ALL_LAYERS) for f in ("add", "mfra_v1", "mfra_v2", "mfra")}),
    "VII": (lambda c: tuple(sorted(c.levels)),
            {(0.005,), (0.015,), (0.045,), (0.1,), (0.005, 0.015), (0.005, 0.015, 0.045),
             (0.005, 0.015, 0.045, 0.1)}),
    "IX": (lambda c: c.loss.lambda2, set(LAMBDA2_GRID)),
}


def _substitute(value, index: int):
    if isinstance(value, str):
        return value.replace("{index}", str(index))
    if isinstance(value, list):
        return [_substitute(v, index) for v in value]
    if isinstance(value, dict):
        return {k: _substitute(v, index) for k, v in value.items()}
    return value


def _block_points(block: dict) -> list[dict[str, Any]]:
    if not isinstance(block, dict) or len(block) != 1 or next(iter(block)) not in ("product", "zip"):
        raise ConfigError(f"grid block must be {{product: ...}} or {{zip: ...}}, got {block!r}")
    mode, axes = next(iter(block.items()))
    if not isinstance(axes, dict) or not axes or not all(isinstance(v, list) and v for v in axes.values()):
        raise ConfigError(f"{mode} block needs non-empty lists per axis")
    keys = list(axes)
    if mode == "zip":
        lengths = {len(v) for v in axes.values()}
        if len(lengths) != 1:
            raise ConfigError(f"zip axes differ in length: {sorted(lengths)}")
        rows = zip(*axes.values())
    else:
        rows = itertools.product(*axes.values())
    return [dict(zip(keys, row)) for row in rows]


@dataclass
class Recipe:
    name: str
    table: str | None
    base: dict
    grids: list[dict]
    description: str = ""
    path: Path | None = None

    @classmethod
    def from_dict(cls, d: dict, path: Path | None = None) -> "Recipe":
        if not isinstance(d, dict) or "name" not in d or "base" not in d:
            raise ConfigError("recipe needs at least 'name' and 'base'")
        unknown = set(d) - {"name", "table", "base", "grids", "description"}
        if unknown:
            raise ConfigError(f"unknown recipe keys: {sorted(unknown)}")
        return cls(d["name"], d.get("table"), d["base"] or {}, d.get("grids") or [], d.get("description", ""), path)

    def to_dict(self) -> dict:
        d = {"name": self.name, "table": self.table, "description": self.description, "base": self.base,
             "grids": self.grids}
        return {k: v for k, v in d.items() if v not in (None, "")}

    def points(self) -> list[dict[str, Any]]:
        if not self.grids:
            return [{}]
        return [p for block in self.grids for p in _block_points(block)]

    def configs(self) -> list[TrainConfig]:
        out = []
        for i, point in enumerate(self.points()):
            d = apply_overrides(self.base, [])
            for key, value in point.items():
                set_dotted(d, key, value)
            out.append(TrainConfig.from_dict(_substitute(d, i)))
        return out


def load_recipe(path: str | Path) -> Recipe:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse recipe ({exc})") from exc
    return Recipe.from_dict(data, path)


@dataclass
class RecipeCheck:
    path: Path
    name: str = ""
    table: str | None = None
    configs: int = 0
    ok: bool = False
    message: str = ""


@dataclass
class RecipeReport:
    checks: list[RecipeCheck] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(self.checks) and all(c.ok for c in self.checks)

    def by_table(self, table: str) -> list[RecipeCheck]:
        return [c for c in self.checks if c.table == table]

    def to_text(self) -> str:
        lines = []
        for c in self.checks:
            status = "ok" if c.ok else "FAIL"
            lines.append(f"{status}\t{c.path.name}\ttable={c.table or '-'}\tconfigs={c.configs}\t{c.message}")
        return "\n".join(lines) + "\n"


def check_recipe(path: Path) -> RecipeCheck:
    check = RecipeCheck(path)
    try:
        recipe = load_recipe(path)
        check.name, check.table = recipe.name, recipe.table
        configs = recipe.configs()
        check.configs = len(configs)
        for cfg in configs:
            again = TrainConfig.from_dict(yaml.safe_load(yaml.safe_dump(cfg.to_dict())))
            if again != cfg:
                raise ConfigError(f"config does not round-trip: {cfg.to_dict()}")
        if Recipe.from_dict(yaml.safe_load(yaml.safe_dump(recipe.to_dict()))).configs() != configs:
            raise ConfigError("recipe does not round-trip")
        if recipe.table is not None:
            if recipe.table not in TABLE_FACTORS:
                raise ConfigError(f"unknown table {recipe.table!r}")
            key, expected = TABLE_FACTORS[recipe.table]
            coords = [key(c) for c in configs]
            if len(set(coords)) != len(coords):
                raise ConfigError("duplicate grid coordinates")
            if set(coords) != expected:
                missing = sorted(map(str, expected - set(coords)))
                extra = sorted(map(str, set(coords) - expected))
                raise ConfigError(f"grid mismatch for table {recipe.table}: missing {missing}, extra {extra}")
        check.ok = True
        check.message = "parsed"
    except StructNetError as exc:
        check.message = str(exc)
    return check


def validate_recipes(directory: str | Path) -> RecipeReport:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"recipe directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix in (".yaml", ".yml"))
    if not files:
        raise ConfigError(f"no recipes in {directory}")
    return RecipeReport([check_recipe(p) for p in files])

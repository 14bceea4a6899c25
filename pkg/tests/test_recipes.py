from pathlib import Path

import pytest
import yaml

from structnet.errors import ConfigError
from structnet.recipes import Recipe, load_recipe, validate_recipes

RECIPES = Path(__file__).resolve().parent.parent / "recipes"


def test_shipped_recipes_valid():
    report = validate_recipes(RECIPES)
    assert report.ok, report.to_text()
    tables = {c.table: c.configs for c in report.checks if c.table}
    assert tables == {"I": 10, "IV": 12, "V": 4, "VI": 4, "VII": 7, "IX": 4}


def test_table_grids():
    iv = load_recipe(RECIPES / "table4_msfe_placement.yaml").configs()
    assert sorted((c.variant.fusion, c.variant.layers) for c in iv) == sorted(
        [(f, (j,)) for f in ("add", "mfra") for j in range(1, 6)] + [(f, (1, 2, 3, 4, 5)) for f in ("add", "mfra")])
    ix = load_recipe(RECIPES / "table9_lambda2.yaml").configs()
    assert sorted(c.loss.lambda2 for c in ix) == [0.01, 0.1, 1.0, 10.0]
    vi = load_recipe(RECIPES / "table6_fusion.yaml").configs()
    assert sorted(c.variant.fusion for c in vi) == ["add", "mfra", "mfra_v1", "mfra_v2"]
    assert all(c.seed is not None and c.data.kind == "synthetic" for c in iv + ix + vi)
    assert len({c.out_dir for c in iv}) == 12


def test_empty_dir(tmp_path):
    with pytest.raises(ConfigError):
        validate_recipes(tmp_path)


def test_bad_recipes_reported(tmp_path):
    (tmp_path / "broken.yaml").write_text("name: [oops\n")
    (tmp_path / "wrong_grid.yaml").write_text(yaml.safe_dump({
        "name": "w", "table": "IX", "base": {"seed": 0},
        "grids": [{"product": {"loss.lambda2": [0.1, 1.0]}}]}))
    (tmp_path / "bad_key.yaml").write_text(yaml.safe_dump({"name": "k", "base": {"sed": 0}}))
    (tmp_path / "zip.yaml").write_text(yaml.safe_dump({
        "name": "z", "base": {"seed": 0}, "grids": [{"zip": {"steps": [1, 2], "batch_size": [1]}}]}))
    report = validate_recipes(tmp_path)
    assert not report.ok
    status = {c.path.name: c for c in report.checks}
    assert not any(c.ok for c in status.values())
    assert "missing" in status["wrong_grid.yaml"].message


def test_recipe_round_trip():
    r = load_recipe(RECIPES / "table7_mstructnet_levels.yaml")
    again = Recipe.from_dict(yaml.safe_load(yaml.safe_dump(r.to_dict())))
    assert again.configs() == r.configs()

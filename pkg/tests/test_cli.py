import json

import numpy as np
import pytest
import yaml

from structnet.cli import main
from structnet.color_io import load_image, save_image, save_mask

SMALL = "filters=[8, 16, 32, 32, 32]"


def _config(tmp_path, **extra):
    d = {"model": "structnet_stage1", "steps": 3, "batch_size": 2, "filters": [8, 16, 32, 32, 32],
         "perceptual": {"backbone": "surrogate"}, "log_interval": 0, "checkpoint_interval": 0,
         "data": {"kind": "synthetic", "size": 32, "count": 4, "seed": 0}, "out_dir": str(tmp_path / "run")}
    d.update(extra)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(d))
    return path


def test_extract_structure(tmp_path, rng, capsys):
    save_image(rng.random((16, 16, 3)), tmp_path / "in.png")
    assert main(["extract-structure", "--input", str(tmp_path / "in.png"), "--level", "0.015",
                 "--output", str(tmp_path / "out.png")]) == 0
    assert load_image(tmp_path / "out.png").shape == (16, 16, 3)
    assert main(["extract-structure", "--input", str(tmp_path / "missing.png"), "--level", "0.015",
                 "--output", str(tmp_path / "o.png")]) == 3
    assert main(["extract-structure", "--input", str(tmp_path / "in.png"), "--level", "-1",
                 "--output", str(tmp_path / "o.png")]) == 2


def test_train_requires_seed(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--config", str(_config(tmp_path))])
    assert exc.value.code == 2


def test_train_eval_infer_dump(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert main(["train", "--config", str(cfg), "--seed", "1", "--set", "steps=2"]) == 0
    ckpt = tmp_path / "run" / "final.pt"
    assert ckpt.exists() and len((tmp_path / "run" / "loss_curve.csv").read_text().splitlines()) == 3

    assert main(["gen-synthetic", "--out", str(tmp_path / "data"), "--count", "2", "--size", "32",
                 "--split", "test"]) == 0
    data = tmp_path / "data"
    name = sorted((data / "test_A").iterdir())[0].name
    out = tmp_path / "pred" / name
    assert main(["infer", "--checkpoint", str(ckpt), "--input", str(data / "test_A" / name),
                 "--mask", str(data / "test_B" / name), "--out", str(out)]) == 0
    assert main(["infer", "--checkpoint", str(ckpt), "--input", str(data / "test_A" / name),
                 "--out", str(tmp_path / "x.png")]) == 2

    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(data / "test_C"),
                 "--mask", str(data / "test_B"), "--out", str(tmp_path / "report")]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["count"] == 1 and "-1" not in (tmp_path / "report.txt").read_text()
    assert (tmp_path / "report.png").exists()

    assert main(["dump-features", "--checkpoint", str(ckpt), "--input", str(data / "test_A" / name),
                 "--mask", str(data / "test_B" / name), "--out", str(tmp_path / "feats")]) == 0
    names = {p.name for p in (tmp_path / "feats").iterdir()}
    assert "net_encoder_0_B.png" in names and "net_encoder_0_XinW.png" in names
    assert "net_encoder_0_mfra_weights.png" in names


def test_exit_codes(tmp_path):
    assert main(["train", "--config", str(_config(tmp_path, model="structnet_stage2")), "--seed", "0"]) == 2
    assert main(["train", "--config", str(_config(tmp_path, data={"kind": "istd", "root": str(tmp_path / "none")})),
                 "--seed", "0"]) == 3
    assert main(["train", "--config", str(_config(tmp_path, model="unet", optimizer={"lr": 1e30}, steps=50)),
                 "--seed", "0"]) == 4
    assert main(["eval", "--pred", str(tmp_path / "a"), "--gt", str(tmp_path / "b"), "--mask", str(tmp_path / "c"),
                 "--out", str(tmp_path / "r")]) == 3


def test_level_study_cli(tmp_path):
    cfg = _config(tmp_path, model="unet", batch_size=2)
    assert main(["level-study", "--levels", "0", "0.015", "--steps", "2", "--config", str(cfg),
                 "--test-count", "2", "--out", str(tmp_path / "ls")]) == 0
    assert len((tmp_path / "ls" / "level_study.csv").read_text().splitlines()) == 3
    assert (tmp_path / "ls" / "level_study.png").exists()


def test_validate_recipes_cli(tmp_path, capsys):
    from pathlib import Path

    recipes = Path(__file__).resolve().parent.parent / "recipes"
    assert main(["validate-recipes", "--dir", str(recipes)]) == 0
    assert "table=IV" in capsys.readouterr().out
    assert main(["validate-recipes", "--dir", str(tmp_path)]) == 2

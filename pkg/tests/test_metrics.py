import json
import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from structnet.color_io import save_image, save_mask, srgb_to_lab
from structnet.errors import DataError, EmptyRegionError, ShapeError
from structnet.metrics import (
    evaluate_directory, evaluate_pair, lab_squared_error, mae_lab_region, psnr_region, rmse_lab_region, ssim_map,
    ssim_region,
)


def _half_mask(n):
    m = np.zeros((n, n), dtype=np.uint8)
    m[:, : n // 2] = 1
    return m


def test_rmse_examples(rng):
    a = rng.random((8, 8, 3))
    m = _half_mask(8)
    for r in ("S", "NS", "All"):
        assert rmse_lab_region(a, a, m, r) == 0
    white, black = np.ones((4, 4, 3)), np.zeros((4, 4, 3))
    assert rmse_lab_region(white, black, _half_mask(4), "All") == pytest.approx(100 / math.sqrt(3), abs=1e-6)


def test_rmse_loop_oracle_8x8(rng):
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    m = _half_mask(8)
    la, lb = srgb_to_lab(a), srgb_to_lab(b)
    tot = sum((la[i, j, c] - lb[i, j, c]) ** 2 for i in range(8) for j in range(4) for c in range(3))
    assert rmse_lab_region(a, b, m, "S") == pytest.approx(math.sqrt(tot / (8 * 4 * 3)), abs=1e-6)


def test_region_decomposition_and_symmetry(rng):
    a, b = rng.random((10, 10, 3)), rng.random((10, 10, 3))
    m = (rng.random((10, 10)) < 0.5).astype(np.uint8)
    se = lab_squared_error(a, b)
    assert math.isclose(se.sum(), se[m == 1].sum() + se[m == 0].sum(), rel_tol=1e-14)
    nS, nNS = (m == 1).sum(), (m == 0).sum()
    all_sq = rmse_lab_region(a, b, m, "All") ** 2 * 3 * 100
    parts = rmse_lab_region(a, b, m, "S") ** 2 * 3 * nS + rmse_lab_region(a, b, m, "NS") ** 2 * 3 * nNS
    assert all_sq == pytest.approx(parts, rel=1e-12)
    assert rmse_lab_region(a, b, m, "S") == rmse_lab_region(b, a, m, "S")


def test_empty_region_and_shape_errors(rng):
    a = rng.random((8, 8, 3))
    with pytest.raises(EmptyRegionError):
        rmse_lab_region(a, a, np.zeros((8, 8), dtype=np.uint8), "S")
    with pytest.raises(ShapeError):
        rmse_lab_region(a, a, np.zeros((8, 7), dtype=np.uint8))
    with pytest.raises(ValueError):
        rmse_lab_region(a, a, np.zeros((8, 8), dtype=np.uint8), "edge")


def test_psnr_examples(rng):
    a = rng.random((8, 8, 3)) * 0.8
    m = _half_mask(8)
    assert psnr_region(a, a, m) == 100.0
    assert psnr_region(a + 0.1, a, m) == pytest.approx(20.0, abs=1e-9)
    b = rng.random((8, 8, 3))
    mse = ((a - b) ** 2)[m == 1].mean()
    assert psnr_region(a, b, m, "S") == pytest.approx(10 * math.log10(1 / mse), abs=1e-9)


def test_ssim_matches_reference(rng):
    a, b = rng.random((24, 24, 3)), rng.random((24, 24, 3))
    _, ref = structural_similarity(a, b, channel_axis=2, gaussian_weights=True, sigma=1.5,
                                   use_sample_covariance=False, data_range=1.0, full=True)
    assert np.abs(ssim_map(a, b) - ref.mean(axis=2)).max() < 1e-9


def test_ssim_examples(rng):
    gt = np.clip(0.5 + 0.2 * rng.standard_normal((16, 16, 3)), 0, 1)
    m = _half_mask(16)
    assert ssim_region(gt, gt, m) == pytest.approx(1.0)
    assert ssim_region(1 - gt, gt, m) < 0.5
    full = ssim_map(gt * 0.9, gt)
    assert ssim_region(gt * 0.9, gt, m, "S") == pytest.approx(full[m == 1].mean())
    with pytest.raises(ShapeError):
        ssim_map(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_mae_flag(rng):
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    assert mae_lab_region(a, b, _half_mask(8)) == pytest.approx(np.abs(srgb_to_lab(a) - srgb_to_lab(b)).mean())


def test_evaluate_pair_empty_region_is_none(rng):
    a = rng.random((12, 12, 3))
    out = evaluate_pair(a, a, np.zeros((12, 12), dtype=np.uint8))
    assert out["rmse_lab"]["S"] is None and out["rmse_lab"]["All"] == 0


def _write_set(root, images, masks, names):
    for name, (p, g), m in zip(names, images, masks):
        save_image(p, root / "pred" / f"{name}.png")
        save_image(g, root / "gt" / f"{name}.png")
        save_mask(m, root / "mask" / f"{name}.png")


def test_evaluate_directory(tmp_path, rng):
    for d in ("pred", "gt", "mask"):
        (tmp_path / d).mkdir()
    with pytest.raises(DataError, match="no pairs found"):
        evaluate_directory(tmp_path / "pred", tmp_path / "gt", tmp_path / "mask")

    imgs = [(rng.integers(0, 256, (16, 16, 3)) / 255, rng.integers(0, 256, (16, 16, 3)) / 255) for _ in range(3)]
    masks = [_half_mask(16)] * 3
    _write_set(tmp_path, imgs, masks, ["a", "b", "c"])
    save_image(imgs[0][0], tmp_path / "pred" / "orphan.png")
    report = evaluate_directory(tmp_path / "pred", tmp_path / "gt", tmp_path / "mask")
    assert report.count == 3 and any("orphan" in e for e in report.errors)
    per = [rmse_lab_region(p, g, m, "S") for (p, g), m in zip(imgs, masks)]
    assert report.value("rmse_lab", "S") == pytest.approx(sum(per) / 3)
    txt, js = report.write(tmp_path / "out" / "report")
    assert "rmse_lab.S = " in txt.read_text()
    assert json.loads(js.read_text())["count"] == 3


def test_identical_pair_directory(tmp_path, rng):
    img = rng.integers(0, 256, (16, 16, 3)) / 255
    _write_set(tmp_path, [(img, img)], [_half_mask(16)], ["x"])
    report = evaluate_directory(tmp_path / "pred", tmp_path / "gt", tmp_path / "mask")
    assert report.value("rmse_lab", "All") == 0

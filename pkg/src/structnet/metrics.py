"""Region-wise RMSE (LAB), PSNR and SSIM, and directory evaluation.

Regions: "S" (mask == 1), "NS" (mask == 0) and "All".
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .color_io import load_image, load_mask, srgb_to_lab, validate_image, validate_mask
from .errors import DataError, EmptyRegionError, ShapeError

log = logging.getLogger(__name__)

REGIONS = ("S", "NS", "All")
METRICS = ("rmse_lab", "mae_lab", "psnr", "ssim")
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def region_mask(mask: np.ndarray, region: str) -> np.ndarray:
    if region == "S":
        sel = mask == 1
    elif region == "NS":
        sel = mask == 0
    elif region == "All":
        sel = np.ones(mask.shape, dtype=bool)
    else:
        raise ValueError(f"unknown region {region!r}; expected one of {REGIONS}")
    if not sel.any():
        raise EmptyRegionError(f"region {region} contains no pixels")
    return sel


def _prepare(pred, gt, mask):
    pred = validate_image(pred, "pred")
    gt = validate_image(gt, "gt")
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    return pred, gt, validate_mask(mask, pred.shape[:2])


def lab_squared_error(pred, gt) -> np.ndarray:
    """Per-pixel squared LAB difference summed over the three channels."""
    return np.sum((srgb_to_lab(pred) - srgb_to_lab(gt)) ** 2, axis=-1)


def rmse_lab_region(pred, gt, mask, region: str = "All") -> float:
    pred, gt, mask = _prepare(pred, gt, mask)
    sel = region_mask(mask, region)
    return float(np.sqrt(lab_squared_error(pred, gt)[sel].sum() / (3 * sel.sum())))


def mae_lab_region(pred, gt, mask, region: str = "All") -> float:
    """Mean absolute LAB error; what several shadow-removal codebases report as "RMSE"."""
    pred, gt, mask = _prepare(pred, gt, mask)
    sel = region_mask(mask, region)
    return float(np.abs(srgb_to_lab(pred) - srgb_to_lab(gt))[sel].mean())


def psnr_region(pred, gt, mask, region: str = "All") -> float:
    pred, gt, mask = _prepare(pred, gt, mask)
    sel = region_mask(mask, region)
    mse = float(((pred - gt) ** 2)[sel].mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_map(pred, gt) -> np.ndarray:
    """Per-pixel SSIM (Gaussian window 11, sigma 1.5), averaged over channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if min(pred.shape[:2]) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {pred.shape[:2]}")
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    truncate = ((SSIM_WINDOW - 1) / 2) / SSIM_SIGMA

    def blur(a):
        return gaussian_filter(a, SSIM_SIGMA, mode="reflect", truncate=truncate)

    maps = []
    for c in range(pred.shape[2]):
        x, y = pred[..., c], gt[..., c]
        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cov = blur(x * y) - mx * my
        maps.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return np.mean(maps, axis=0)


def ssim_region(pred, gt, mask, region: str = "All") -> float:
    pred, gt, mask = _prepare(pred, gt, mask)
    sel = region_mask(mask, region)
    return float(ssim_map(pred, gt)[sel].mean())


_METRIC_FNS = {"rmse_lab": rmse_lab_region, "mae_lab": mae_lab_region, "psnr": psnr_region, "ssim": ssim_region}


def evaluate_pair(pred, gt, mask) -> dict[str, dict[str, float | None]]:
    """All metrics for all regions; an empty region yields None."""
    out: dict[str, dict[str, float | None]] = {}
    for metric, fn in _METRIC_FNS.items():
        out[metric] = {}
        for region in REGIONS:
            try:
                out[metric][region] = fn(pred, gt, mask, region)
            except EmptyRegionError:
                out[metric][region] = None
    return out


@dataclass
class MetricsReport:
    aggregate: dict[str, dict[str, float | None]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    per_image: dict[str, dict[str, dict[str, float | None]]] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.per_image)

    def value(self, metric: str, region: str) -> float | None:
        return self.aggregate.get(metric, {}).get(region)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["count"] = self.count
        return d

    def to_text(self) -> str:
        lines = [f"count = {self.count}"]
        for metric in METRICS:
            for region in REGIONS:
                v = self.value(metric, region)
                lines.append(f"{metric}.{region} = {'nan' if v is None else f'{v:.6f}'}")
        for err in self.errors:
            lines.append(f"error = {err}")
        return "\n".join(lines) + "\n"

    def write(self, out: str | Path) -> tuple[Path, Path]:
        """Write <out>.txt (key = value lines) and <out>.json."""
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        txt, js = out.with_suffix(".txt"), out.with_suffix(".json")
        txt.write_text(self.to_text())
        js.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return txt, js


def aggregate(per_image: dict[str, dict[str, dict[str, float | None]]]) -> tuple[dict, dict]:
    """Unweighted mean over images; images with an empty region are skipped for it."""
    agg: dict[str, dict[str, float | None]] = {}
    counts: dict[str, int] = {}
    for metric in METRICS:
        agg[metric] = {}
        for region in REGIONS:
            vals = [m[metric][region] for m in per_image.values() if m[metric][region] is not None]
            agg[metric][region] = float(np.mean(vals)) if vals else None
            counts[region] = len(vals)
    return agg, counts


def _index(directory: Path) -> dict[str, Path]:
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in exts}


def evaluate_directory(pred_dir, gt_dir, mask_dir) -> MetricsReport:
    pred_dir, gt_dir, mask_dir = Path(pred_dir), Path(gt_dir), Path(mask_dir)
    for d in (pred_dir, gt_dir, mask_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    preds, gts, masks = _index(pred_dir), _index(gt_dir), _index(mask_dir)
    report = MetricsReport()
    for name in sorted(set(preds) | set(gts) | set(masks)):
        missing = [label for label, idx in (("pred", preds), ("gt", gts), ("mask", masks)) if name not in idx]
        if missing:
            report.errors.append(f"{name}: missing {', '.join(missing)}")
            continue
        try:
            pred, gt = load_image(preds[name]), load_image(gts[name])
            mask = load_mask(masks[name])
            report.per_image[name] = evaluate_pair(pred, gt, mask)
        except (DataError, ValueError) as exc:
            report.errors.append(f"{name}: {exc}")
    if not report.per_image:
        raise DataError("no pairs found" + (f" ({'; '.join(report.errors)})" if report.errors else ""))
    report.aggregate, report.counts = aggregate(report.per_image)
    return report

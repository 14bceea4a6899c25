"""Image I/O, sRGB <-> CIE LAB conversion and Otsu shadow-mask extraction.

Images are float64 arrays of shape (H, W, 3) in [0, 1]; masks are uint8
arrays of shape (H, W) holding {0, 1}.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import median_filter

from .errors import DecodeError, ShapeError

log = logging.getLogger(__name__)

# sRGB primaries, D65 white.
_RGB_TO_XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_D65 = np.array([0.95047, 1.0, 1.08883])

_LUMA = np.array([0.299, 0.587, 0.114])


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"{name} must be HxWx3, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    return img


def validate_mask(mask: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be HxW, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape):
        raise ShapeError(f"mask shape {mask.shape} does not match image {tuple(shape)}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask values must be in {0, 1}")
    return mask.astype(np.uint8)


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise DecodeError(f"{path}: unsupported mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"{path}: cannot decode image ({exc})") from exc
    return arr.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(validate_image(img)), mode="RGB").save(path)


def load_mask(path: str | Path, threshold: float = 0.5) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such mask: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"{path}: cannot decode mask ({exc})") from exc
    return (arr > threshold).astype(np.uint8)


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mask = validate_mask(mask)
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def srgb_to_lab(img: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] to CIE L*a*b* (D65). L lies in [0, 100]."""
    img = np.asarray(img, dtype=np.float64)
    xyz = _srgb_to_linear(img) @ _RGB_TO_XYZ.T / _D65
    f = np.where(xyz > 0.008856, np.cbrt(xyz), 7.787 * xyz + 16.0 / 116.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_to_srgb(lab: np.ndarray) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    L, a, b = lab[..., 0], lab[..., 1], lab[..., 2]
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    xyz = np.where(f > 0.206893, f ** 3, (f - 16.0 / 116.0) / 7.787)
    rgb_lin = (xyz * _D65) @ _XYZ_TO_RGB.T
    return _linear_to_srgb(rgb_lin)


def luminance(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ _LUMA


def otsu_threshold(levels: np.ndarray) -> int | None:
    """Otsu threshold over 256 integer levels.

    Returns the lowest t maximizing between-class variance of the split
    {v <= t} / {v > t}, or None when the input holds a single level.
    """
    hist = np.bincount(np.asarray(levels, dtype=np.int64).ravel(), minlength=256)[:256]
    total = hist.sum()
    if total == 0 or np.count_nonzero(hist) < 2:
        return None
    p = hist / total
    bins = np.arange(256)
    w0 = np.cumsum(p)
    mu_cum = np.cumsum(p * bins)
    mu_t = mu_cum[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * w0 - mu_cum) ** 2 / (w0 * w1)
    between = np.where((w0 > 0) & (w1 > 0), between, -np.inf)
    best = between.max()
    # relative tolerance keeps ties stable against float reassociation
    candidates = np.flatnonzero(between >= best - 1e-12 * max(abs(best), 1.0))
    return int(candidates[0])


def difference_levels(shadow: np.ndarray, free: np.ndarray) -> np.ndarray:
    shadow = validate_image(shadow, "shadow")
    free = validate_image(free, "free")
    if shadow.shape != free.shape:
        raise ShapeError(f"shadow {shadow.shape} and free {free.shape} differ in shape")
    gray = luminance(np.abs(shadow - free))
    return np.clip(np.rint(gray * 255.0), 0, 255).astype(np.int64)


def otsu_shadow_mask(shadow: np.ndarray, free: np.ndarray, median_size: int = 5) -> np.ndarray:
    """Binary shadow mask from a shadow / shadow-free pair.

    The luminance of |shadow - free| is quantized to 256 levels and split at
    the Otsu threshold; a median filter of ``median_size`` (0 disables it)
    removes isolated pixels. A constant difference image yields all zeros.
    """
    levels = difference_levels(shadow, free)
    t = otsu_threshold(levels)
    if t is None:
        return np.zeros(levels.shape, dtype=np.uint8)
    mask = (levels > t).astype(np.uint8)
    if median_size and median_size > 1:
        mask = median_filter(mask, size=median_size, mode="reflect")
    return mask

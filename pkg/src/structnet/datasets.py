"""Dataset ingestion, synthetic shadow generation and batch assembly."""
from __future__ import annotations

import hashlib
import logging
import math
import warnings
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter, zoom

from .color_io import load_image, load_mask, otsu_shadow_mask, validate_image, validate_mask
from .errors import ConfigError, DataError
from .structure_rtv import RTVParams, extract_structure

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")
DEFAULT_SIZE = 256


@dataclass
class TripletSample:
    shadow: np.ndarray
    mask: np.ndarray
    free: np.ndarray
    id: str

    def __post_init__(self):
        self.shadow = validate_image(self.shadow, "shadow")
        self.free = validate_image(self.free, "free")
        if self.shadow.shape != self.free.shape:
            raise DataError(f"{self.id}: shadow {self.shadow.shape} and free {self.free.shape} differ")
        self.mask = validate_mask(self.mask, self.shadow.shape[:2])
        if self.shadow.min() < 0 or self.shadow.max() > 1 or self.free.min() < 0 or self.free.max() > 1:
            raise DataError(f"{self.id}: image values outside [0, 1]")


def resize_image(img: np.ndarray, size: int | tuple[int, int] | None) -> np.ndarray:
    if size is None:
        return img
    hw = (size, size) if isinstance(size, int) else tuple(size)
    if img.shape[:2] == hw:
        return img
    t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=hw, mode="bilinear", align_corners=False)[0].numpy().transpose(1, 2, 0)
    return np.clip(out, 0.0, 1.0)


def resize_mask(mask: np.ndarray, size: int | tuple[int, int] | None) -> np.ndarray:
    if size is None:
        return mask
    hw = (size, size) if isinstance(size, int) else tuple(size)
    if mask.shape == hw:
        return mask
    t = torch.from_numpy(mask.astype(np.float64))[None, None]
    out = F.interpolate(t, size=hw, mode="bilinear", align_corners=False)[0, 0].numpy()
    return (out >= 0.5).astype(np.uint8)


def _index(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def load_istd_style(root, split: str = "train", size: int | None = DEFAULT_SIZE) -> list[TripletSample]:
    """Triplets from <root>/<split>_A (shadow), _B (mask), _C (shadow-free)."""
    root = Path(root)
    dirs = [root / f"{split}_{s}" for s in "ABC"]
    a, b, c = (_index(d) for d in dirs)
    samples = []
    for name in sorted(set(a) | set(b) | set(c)):
        if not (name in a and name in b and name in c):
            warnings.warn(f"{name}: missing counterpart in {root} ({split}); skipped", stacklevel=2)
            continue
        samples.append(TripletSample(
            resize_image(load_image(a[name]), size), resize_mask(load_mask(b[name]), size),
            resize_image(load_image(c[name]), size), name,
        ))
    if not samples:
        raise DataError(f"no ISTD-style triplets under {root} (split {split!r})")
    return samples


def load_srd_style(root, size: int | None = DEFAULT_SIZE) -> list[TripletSample]:
    """Pairs from <root>/shadow and <root>/shadow_free; masks derived with Otsu."""
    root = Path(root)
    shadow, free = _index(root / "shadow"), _index(root / "shadow_free")
    samples = []
    for name in sorted(set(shadow) | set(free)):
        if name not in shadow or name not in free:
            warnings.warn(f"{name}: missing counterpart in {root}; skipped", stacklevel=2)
            continue
        s = resize_image(load_image(shadow[name]), size)
        f = resize_image(load_image(free[name]), size)
        samples.append(TripletSample(s, otsu_shadow_mask(s, f), f, name))
    if not samples:
        raise DataError(f"no SRD-style pairs under {root}")
    return samples


@dataclass(frozen=True)
class SyntheticShadowSpec:
    """Desk-scale stand-in for ISTD: smooth colour field, polygons, texture, a darkened region."""

    size: int = 64
    attenuation: tuple[float, float] = (0.3, 0.8)
    coverage: tuple[float, float] = (0.05, 0.4)
    softness: float = 1.0
    texture: float = 0.04
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.attenuation
        if not 0.0 <= lo <= hi <= 0.8:
            raise ConfigError(f"attenuation range {self.attenuation} must satisfy 0 <= lo <= hi <= 0.8")
        lo, hi = self.coverage
        if not 0.05 <= lo <= hi <= 0.4:
            raise ConfigError(f"coverage range {self.coverage} must lie within [0.05, 0.4]")
        if self.size < 8 or self.softness < 0 or self.texture < 0:
            raise ConfigError("size must be >= 8 and softness, texture non-negative")


def _polygon(rng: np.random.Generator, size: int, radius: float) -> list[tuple[float, float]]:
    cx, cy = rng.uniform(0.15, 0.85, 2) * size
    n = int(rng.integers(4, 8))
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    radii = radius * rng.uniform(0.6, 1.0, n)
    return [(float(cx + r * math.cos(a)), float(cy + r * math.sin(a))) for a, r in zip(angles, radii)]


def _raster(poly, size: int) -> np.ndarray:
    im = Image.new("L", (size, size), 0)
    ImageDraw.Draw(im).polygon(poly, fill=1)
    return np.asarray(im, dtype=np.uint8)


def _free_image(rng: np.random.Generator, spec: SyntheticShadowSpec) -> np.ndarray:
    n = spec.size
    coarse = rng.uniform(0.35, 0.95, (4, 4, 3))
    img = zoom(coarse, (n / 4, n / 4, 1), order=1, mode="nearest")[:n, :n]
    for _ in range(int(rng.integers(2, 5))):
        region = _raster(_polygon(rng, n, rng.uniform(0.1, 0.3) * n), n).astype(bool)
        img[region] = rng.uniform(0.3, 1.0, 3)
    if spec.texture > 0:
        period = int(rng.integers(2, 4))
        yy, xx = np.mgrid[0:n, 0:n]
        pattern = np.where(((yy // period) + (xx // period)) % 2 == 0, 1.0, -1.0)
        img = img + spec.texture * pattern[..., None] + 0.5 * spec.texture * rng.standard_normal((n, n, 1))
    return np.clip(img, 0.0, 1.0)


def _shadow_mask(rng: np.random.Generator, spec: SyntheticShadowSpec) -> np.ndarray:
    n = spec.size
    lo, hi = spec.coverage
    for _ in range(100):
        target = rng.uniform(lo, hi)
        mask = _raster(_polygon(rng, n, n * math.sqrt(target / math.pi) * 1.2), n)
        cov = mask.mean()
        if lo <= cov <= hi:
            return mask
    raise DataError(f"could not draw a shadow mask with coverage in {spec.coverage} after 100 tries")


def synthesize_shadow(free: np.ndarray, mask: np.ndarray, attenuation: float, softness: float) -> np.ndarray:
    soft = gaussian_filter(mask.astype(np.float64), softness) if softness > 0 else mask.astype(np.float64)
    return np.clip(free * (1.0 - attenuation * soft[..., None]), 0.0, 1.0)


def generate_synthetic(spec: SyntheticShadowSpec, count: int) -> list[TripletSample]:
    if count < 1:
        raise ConfigError("count must be >= 1")
    children = np.random.SeedSequence(spec.seed).spawn(count)
    samples = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        free = _free_image(rng, spec)
        mask = _shadow_mask(rng, spec)
        a = float(rng.uniform(*spec.attenuation))
        samples.append(TripletSample(synthesize_shadow(free, mask, a, spec.softness), mask, free,
                                     f"syn{spec.seed}_{i:04d}"))
    return samples


def image_hash(img: np.ndarray) -> str:
    arr = np.ascontiguousarray(img, dtype=np.float64)
    h = hashlib.sha256(arr.tobytes())
    h.update(str(arr.shape).encode())
    return h.hexdigest()[:32]


class StructureCache:
    """On-disk cache of structure layers keyed by (image hash, level)."""

    def __init__(self, directory: str | Path | None, params: RTVParams = RTVParams()):
        self.dir = Path(directory) if directory else None
        self.params = params
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, img: np.ndarray, level: float) -> Path | None:
        if self.dir is None:
            return None
        return self.dir / f"{image_hash(img)}_l{level:.6g}.npy"

    def get(self, img: np.ndarray, level: float) -> np.ndarray:
        p = self.path(img, level)
        if p is not None and p.exists():
            return np.load(p)
        s = extract_structure(img, level)
        if p is not None:
            tmp = p.with_suffix(".tmp.npy")
            np.save(tmp, s)
            tmp.replace(p)
        return s


def _to_tensor(arrays: Sequence[np.ndarray]) -> torch.Tensor:
    stack = np.stack(arrays)
    if stack.ndim == 3:
        stack = stack[..., None]
    return torch.from_numpy(stack.transpose(0, 3, 1, 2).astype(np.float32))


@dataclass
class Batch:
    ids: list[str]
    image: torch.Tensor
    mask: torch.Tensor
    free: torch.Tensor
    structures: dict[float, torch.Tensor]
    structures_gt: dict[float, torch.Tensor]

    def __len__(self):
        return len(self.ids)


class BatchStream:
    """Seed-shuffled batches with precomputed structures for the requested levels.

    Each pass over the data reshuffles with a generator derived from
    (seed, epoch), so the order does not depend on how many batches were
    consumed elsewhere.
    """

    def __init__(self, samples: Sequence[TripletSample], batch_size: int, seed: int,
                 levels: Sequence[float] = (), cache_dir: str | Path | None = None):
        if not samples:
            raise DataError("no samples to batch")
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if batch_size > len(samples):
            warnings.warn(f"batch size {batch_size} exceeds {len(samples)} samples; using one smaller batch",
                          stacklevel=2)
        self.samples = list(samples)
        self.batch_size = min(batch_size, len(samples))
        self.seed = seed
        self.levels = tuple(float(lv) for lv in levels)
        cache = StructureCache(cache_dir)
        self.structures = [{lv: cache.get(s.shadow, lv) for lv in self.levels} for s in self.samples]
        self.structures_gt = [{lv: cache.get(s.free, lv) for lv in self.levels} for s in self.samples]

    def order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, epoch])
        return rng.permutation(len(self.samples))

    def collate(self, idx: Sequence[int]) -> Batch:
        ss = [self.samples[i] for i in idx]
        return Batch(
            ids=[s.id for s in ss],
            image=_to_tensor([s.shadow for s in ss]),
            mask=_to_tensor([s.mask.astype(np.float64) for s in ss]),
            free=_to_tensor([s.free for s in ss]),
            structures={lv: _to_tensor([self.structures[i][lv] for i in idx]) for lv in self.levels},
            structures_gt={lv: _to_tensor([self.structures_gt[i][lv] for i in idx]) for lv in self.levels},
        )

    def epoch(self, epoch: int = 0) -> Iterator[Batch]:
        order = self.order(epoch)
        for start in range(0, len(order), self.batch_size):
            yield self.collate(order[start : start + self.batch_size])

    def forever(self) -> Iterator[Batch]:
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


def make_batches(samples, batch_size: int, seed: int, levels: Sequence[float] = (),
                 cache_dir: str | Path | None = None) -> Iterator[Batch]:
    """One seeded pass over ``samples``."""
    return BatchStream(samples, batch_size, seed, levels, cache_dir).epoch(0)

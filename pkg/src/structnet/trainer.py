"""Training loops, checkpoints, the structure-level study and inference."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import yaml

from .color_io import load_image, load_mask, save_image
from .config import TrainConfig, dump_config
from .datasets import Batch, BatchStream, TripletSample, generate_synthetic, load_istd_style, load_srd_style
from .errors import ConfigError, DataError, ManifestError, NumericalAbort, ShapeError
from .losses import LossConfig, TotalLoss
from .metrics import REGIONS, rmse_lab_region
from .models import GuidedStage2, ModelVariant, MStructNet, StructNetStage1, UNetSpec, vanilla_unet
from .structure_rtv import extract_structure

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "structnet-checkpoint/1"


def build_model(kind: str, levels: Sequence[float], variant: ModelVariant, spec: UNetSpec) -> nn.Module:
    if kind == "unet":
        return vanilla_unet(4, spec)
    if kind == "structnet_stage1":
        return StructNetStage1(variant, spec)
    if kind == "structnet_stage2":
        return GuidedStage2(spec)
    if kind == "mstructnet":
        return MStructNet(levels, spec, fusion=variant.fusion)
    raise ConfigError(f"unknown model kind {kind!r}")


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True, warn_only=True)


def parameter_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- checkpoints -------------------------------------------------------------

def make_manifest(config: TrainConfig, step: int) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "model": config.model,
        "levels": [float(lv) for lv in config.levels],
        "variant": {"bridge": config.variant.bridge, "fusion": config.variant.fusion,
                    "layers": list(config.variant.layers), "literal_alpha": config.variant.literal_alpha},
        "filters": list(config.filters),
        "seed": config.seed,
        "step": step,
        "guidance": config.guidance,
        "stage1_checkpoint": config.stage1_checkpoint,
    }


def save_checkpoint(path: str | Path, model: nn.Module, manifest: dict) -> Path:
    """Single archive: parameter tensors by hierarchical name plus a YAML manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for name, t in model.state_dict().items():
        if t.is_floating_point() and not torch.isfinite(t).all():
            raise NumericalAbort(f"refusing to checkpoint non-finite tensor {name}")
    tmp = path.with_suffix(".tmp")
    torch.save({"manifest": yaml.safe_dump(manifest, sort_keys=False), "state_dict": model.state_dict()}, tmp)
    tmp.replace(path)
    return path


def read_manifest(path: str | Path) -> dict:
    return load_checkpoint(path)[1]


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        manifest = yaml.safe_load(blob["manifest"])
    except Exception as exc:
        raise ManifestError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise ManifestError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
    variant = ModelVariant(**manifest["variant"])
    model = build_model(manifest["model"], manifest["levels"], variant, UNetSpec(filters=tuple(manifest["filters"])))
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise ManifestError(f"{path}: parameters do not match manifest ({exc})") from exc
    model.eval()
    return model, manifest


# -- forward plumbing --------------------------------------------------------

def forward_batch(model: nn.Module, kind: str, levels: Sequence[float], batch: Batch, guidance: str = "stage1",
                  stage1: nn.Module | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """(prediction, target) for one batch under the given model kind."""
    if kind in ("unet", "structnet_stage1"):
        lv = float(levels[0])
        s, target = batch.structures[lv], batch.structures_gt[lv]
        if kind == "unet":
            return model(torch.cat([s, batch.mask], dim=1)), target
        return model(s, batch.mask), target
    if kind == "structnet_stage2":
        lv = float(levels[0])
        if guidance == "gt_structure":
            guide = batch.structures_gt[lv]
        elif guidance == "shadow_structure":
            guide = batch.structures[lv]
        else:
            if stage1 is None:
                raise ConfigError("stage-1 guidance needs a stage-1 model")
            with torch.no_grad():
                guide = run_stage1(stage1, batch.structures[lv], batch.mask)
        return model(batch.image, guide, batch.mask), batch.free
    if kind == "mstructnet":
        return model(batch.image, {float(lv): batch.structures[float(lv)] for lv in levels}, batch.mask), batch.free
    raise ConfigError(f"unknown model kind {kind!r}")


def run_stage1(stage1: nn.Module, structure: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if isinstance(stage1, StructNetStage1):
        return stage1(structure, mask)
    return stage1(torch.cat([structure, mask], dim=1))


def load_samples(config: TrainConfig, seed_offset: int = 0, count: int | None = None) -> list[TripletSample]:
    d = config.data
    if d.kind == "synthetic":
        return generate_synthetic(d.synthetic_spec(d.seed + seed_offset), count or d.count)
    if d.kind == "istd":
        return load_istd_style(d.root, d.split, d.size)
    return load_srd_style(d.root, d.size)


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: nn.Module
    losses: list[float]
    checkpoint: Path
    out_dir: Path
    checkpoints: list[Path] = field(default_factory=list)
    seconds: float = 0.0


def write_loss_curve(path: Path, losses: Sequence[float]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])
    return path


def read_loss_curve(path: str | Path) -> list[float]:
    with Path(path).open() as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]


def train(config: TrainConfig, samples: Sequence[TripletSample] | None = None, plot: bool = True) -> TrainResult:
    if config.seed is None:
        raise ConfigError("training needs an explicit seed")
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(config))
    seed_everything(config.seed)

    if samples is None:
        samples = load_samples(config)
    stream = BatchStream(samples, config.batch_size, config.seed, config.levels, config.cache_dir)

    stage1 = None
    if config.model == "structnet_stage2" and config.guidance == "stage1":
        stage1, manifest = load_checkpoint(config.stage1_checkpoint)
        if manifest["model"] not in ("unet", "structnet_stage1"):
            raise ManifestError(f"{config.stage1_checkpoint} is a {manifest['model']} checkpoint, not stage 1")
        stage1.requires_grad_(False).eval()
    stage1_digest = parameter_digest(stage1) if stage1 is not None else None

    torch.manual_seed(config.seed)
    model = build_model(config.model, config.levels, config.variant, config.unet_spec)
    model.train()
    criterion = TotalLoss(config.loss)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=tuple(config.betas))

    losses: list[float] = []
    saved: list[Path] = []
    batches = stream.forever()
    start = time.time()
    for step in range(1, config.steps + 1):
        batch = next(batches)
        pred, target = forward_batch(model, config.model, config.levels, batch, config.guidance, stage1)
        loss = criterion(pred, target)
        value = float(loss.detach())
        if not math.isfinite(value):
            dump = out / "nan_abort.json"
            dump.write_text(json.dumps({"step": step, "loss": repr(value), "batch": batch.ids,
                                        "recent_losses": losses[-20:]}, indent=2))
            raise NumericalAbort(f"non-finite loss at step {step}; diagnostics in {dump}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(value)
        if config.log_interval and step % config.log_interval == 0:
            log.info("step %d/%d loss %.5f (%.1fs)", step, config.steps, value, time.time() - start)
        if config.checkpoint_interval and step % config.checkpoint_interval == 0 and step < config.steps:
            saved.append(save_checkpoint(out / f"step_{step:06d}.pt", model, make_manifest(config, step)))

    final = save_checkpoint(out / "final.pt", model, make_manifest(config, config.steps))
    saved.append(final)
    write_loss_curve(out / "loss_curve.csv", losses)
    if plot:
        from .plotting import plot_loss_curve

        plot_loss_curve(losses, out / "loss_curve.png", title=f"{config.model} (seed {config.seed})")
    if stage1 is not None and parameter_digest(stage1) != stage1_digest:
        raise NumericalAbort("stage-1 parameters changed during stage-2 training")
    model.eval()
    return TrainResult(model, losses, final, out, saved, time.time() - start)


# -- evaluation --------------------------------------------------------------

def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().double().numpy().transpose(0, 2, 3, 1)


@torch.no_grad()
def evaluate_model(model: nn.Module, kind: str, levels: Sequence[float], samples: Sequence[TripletSample],
                   guidance: str = "stage1", stage1: nn.Module | None = None, batch_size: int = 16,
                   cache_dir=None) -> dict[str, float]:
    """Mean region-wise LAB RMSE of predictions against their targets."""
    model.eval()
    stream = BatchStream(samples, min(batch_size, len(samples)), 0, levels, cache_dir)
    per_region: dict[str, list[float]] = {r: [] for r in REGIONS}
    for idx in range(0, len(samples), stream.batch_size):
        batch = stream.collate(list(range(idx, min(idx + stream.batch_size, len(samples)))))
        pred, target = forward_batch(model, kind, levels, batch, guidance, stage1)
        p, t = _to_numpy(pred), _to_numpy(target)
        m = batch.mask[:, 0].numpy().astype(np.uint8)
        for i in range(len(batch)):
            for r in REGIONS:
                if r == "S" and not m[i].any() or r == "NS" and m[i].all():
                    continue
                per_region[r].append(rmse_lab_region(np.clip(p[i], 0, 1), np.clip(t[i], 0, 1), m[i], r))
    return {r: float(np.mean(v)) for r, v in per_region.items() if v}


@dataclass
class LevelStudyResult:
    table: dict[float, dict[str, float]]
    checkpoints: dict[float, Path]
    table_path: Path
    figure_path: Path | None = None


def write_table(path: Path, table: dict[float, dict[str, float]]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", *REGIONS])
        for lv in sorted(table):
            w.writerow([f"{lv:g}", *(f"{table[lv][r]:.6f}" for r in REGIONS)])
    return path


def run_level_study(levels: Sequence[float], train_samples: Sequence[TripletSample],
                    test_samples: Sequence[TripletSample], steps: int, seed: int, out_dir: str | Path,
                    batch_size: int = 4, base: TrainConfig | None = None, plot: bool = True) -> LevelStudyResult:
    """Train one plain UNet per level on (S_l, M) -> S_l* and report structure RMSE per region."""
    out = Path(out_dir)
    base = base or TrainConfig(model="unet", seed=seed, loss=LossConfig(lambda2=0.0, backbone="surrogate"))
    table: dict[float, dict[str, float]] = {}
    ckpts: dict[float, Path] = {}
    for lv in levels:
        cfg = replace(base, model="unet", levels=[float(lv)], steps=steps, seed=seed, batch_size=batch_size,
                      out_dir=str(out / f"level_{lv:g}"))
        log.info("level study: training level %g for %d steps", lv, steps)
        result = train(cfg, train_samples, plot=plot)
        table[float(lv)] = evaluate_model(result.model, "unet", [lv], test_samples, cache_dir=cfg.cache_dir)
        ckpts[float(lv)] = result.checkpoint
    out.mkdir(parents=True, exist_ok=True)
    table_path = write_table(out / "level_study.csv", table)
    fig = None
    if plot:
        from .plotting import plot_level_study

        fig = plot_level_study(table, out / "level_study.png")
    return LevelStudyResult(table, ckpts, table_path, fig)


# -- inference ---------------------------------------------------------------

def _image_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(img.transpose(2, 0, 1)[None].astype(np.float32))


@torch.no_grad()
def predict(model: nn.Module, manifest: dict, image: np.ndarray, mask: np.ndarray | None,
            stage1: nn.Module | None = None, structure: np.ndarray | None = None) -> np.ndarray:
    kind = manifest["model"]
    levels = manifest["levels"]
    if mask is None:
        raise ConfigError(f"{kind} checkpoints need a shadow mask (--mask)")
    if mask.shape != image.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    m = torch.from_numpy(mask.astype(np.float32))[None, None]
    img = _image_tensor(image)
    if kind in ("unet", "structnet_stage1"):
        s = _image_tensor(extract_structure(image, levels[0]))
        out = run_stage1(model, s, m) if kind == "structnet_stage1" else model(torch.cat([s, m], dim=1))
    elif kind == "structnet_stage2":
        if structure is not None:
            guide = _image_tensor(structure)
        elif stage1 is not None:
            guide = run_stage1(stage1, _image_tensor(extract_structure(image, levels[0])), m)
        else:
            raise ConfigError("stage-2 inference needs a stage-1 checkpoint or a precomputed structure")
        out = model(img, guide, m)
    elif kind == "mstructnet":
        structures = {float(lv): _image_tensor(extract_structure(image, lv)) for lv in levels}
        out = model(img, structures, m)
    else:
        raise ManifestError(f"unknown model kind {kind!r} in manifest")
    return out[0].double().numpy().transpose(1, 2, 0)


def infer(checkpoint, image_path, mask_path, out_path, stage1_checkpoint=None, structure_path=None) -> Path:
    model, manifest = load_checkpoint(checkpoint)
    stage1 = None
    if manifest["model"] == "structnet_stage2" and structure_path is None:
        path = stage1_checkpoint or manifest.get("stage1_checkpoint")
        if not path:
            raise ConfigError("stage-2 inference needs --stage1 or --structure")
        stage1, m1 = load_checkpoint(path)
        if m1["model"] not in ("unet", "structnet_stage1"):
            raise ManifestError(f"{path} is not a stage-1 checkpoint")
    image = load_image(image_path)
    mask = load_mask(mask_path) if mask_path else None
    structure = load_image(structure_path) if structure_path else None
    out = predict(model, manifest, image, mask, stage1, structure)
    save_image(np.clip(out, 0.0, 1.0), out_path)
    return Path(out_path)

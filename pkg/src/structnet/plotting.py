"""Matplotlib figures written next to the text / CSV reports."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

REGION_COLORS = {"S": "#c0392b", "NS": "#2874a6", "All": "#555555"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curve(losses: Sequence[float], path, title: str = "", smooth: int = 25) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=0.6, alpha=0.45, color="#7f8c8d", label="per step")
    if len(losses) >= smooth:
        kernel = np.ones(smooth) / smooth
        ax.plot(steps[smooth - 1:], np.convolve(losses, kernel, mode="valid"), lw=1.4, color="#1f618d",
                label=f"mean of {smooth}")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_level_study(table: Mapping[float, Mapping[str, float]], path) -> Path:
    levels = sorted(table)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    x = np.arange(len(levels))
    for region, color in REGION_COLORS.items():
        ax.plot(x, [table[lv].get(region, np.nan) for lv in levels], marker="o", color=color, label=region)
    ax.set_xticks(x, [f"{lv:g}" for lv in levels])
    ax.set_xlabel("structure level")
    ax.set_ylabel("structure RMSE (LAB)")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_metrics_report(aggregate: Mapping[str, Mapping[str, float | None]], path) -> Path:
    metrics = [m for m in ("rmse_lab", "psnr", "ssim") if m in aggregate]
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3))
    axes = np.atleast_1d(axes)
    for ax, metric in zip(axes, metrics):
        vals = [aggregate[metric].get(r) for r in REGION_COLORS]
        ax.bar(list(REGION_COLORS), [np.nan if v is None else v for v in vals], color=list(REGION_COLORS.values()))
        ax.set_title(metric)
    return _save(fig, path)


def feature_grid(features: np.ndarray, max_channels: int = 16) -> np.ndarray:
    """Tile the first channels of a C x H x W map into one min-max normalized image."""
    feats = np.asarray(features, dtype=np.float64)[:max_channels]
    c, h, w = feats.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    grid = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1))
    for i, f in enumerate(feats):
        lo, hi = f.min(), f.max()
        f = (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)
        r, q = divmod(i, cols)
        grid[r * (h + 1): r * (h + 1) + h, q * (w + 1): q * (w + 1) + w] = f
    return grid


def save_feature_grid(features: np.ndarray, path, cmap: str = "viridis") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, feature_grid(features), cmap=cmap)
    return path


def save_weight_heatmaps(weights: np.ndarray, path, labels: Sequence[str] = ("s=1", "s=24", "s=12", "s=6")) -> Path:
    """Per-branch MFRA fusion weights (S x H x W) side by side on a shared [0, 1] scale."""
    fig, axes = plt.subplots(1, len(weights), figsize=(2.4 * len(weights), 2.6))
    for ax, w, label in zip(np.atleast_1d(axes), weights, labels):
        im = ax.imshow(w, vmin=0.0, vmax=1.0, cmap="magma")
        ax.set_title(label, fontsize=9)
        ax.axis("off")
    fig.colorbar(im, ax=list(np.atleast_1d(axes)), shrink=0.8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

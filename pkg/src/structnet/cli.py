"""Command-line entry point: ``structnet <verb> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, StructNetError

log = logging.getLogger("structnet")


def cmd_extract_structure(args) -> int:
    from .color_io import load_image, save_image
    from .structure_rtv import extract_structure

    save_image(extract_structure(load_image(args.input), args.level), args.output)
    print(f"wrote {args.output}")
    return 0


def cmd_train(args) -> int:
    from .config import apply_overrides, load_config_dict, TrainConfig
    from .trainer import train

    d = apply_overrides(load_config_dict(args.config), args.set)
    d["seed"] = args.seed
    if args.out:
        d["out_dir"] = args.out
    if args.steps is not None:
        d["steps"] = args.steps
    config = TrainConfig.from_dict(d)
    result = train(config)
    print(f"final loss {result.losses[-1]:.6f} after {len(result.losses)} steps")
    print(f"checkpoint {result.checkpoint}")
    print(f"loss curve {result.out_dir / 'loss_curve.csv'}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_directory
    from .plotting import plot_metrics_report

    report = evaluate_directory(args.pred, args.gt, args.mask)
    txt, js = report.write(args.out)
    fig = plot_metrics_report(report.aggregate, Path(args.out).with_suffix(".png"))
    sys.stdout.write(report.to_text())
    print(f"wrote {txt}, {js}, {fig}")
    return 0


def cmd_infer(args) -> int:
    from .trainer import infer

    out = infer(args.checkpoint, args.input, args.mask, args.out, args.stage1, args.structure)
    print(f"wrote {out}")
    return 0


def cmd_level_study(args) -> int:
    from .config import TrainConfig, apply_overrides, load_config_dict
    from .trainer import load_samples, run_level_study

    d = apply_overrides(load_config_dict(args.config), args.set)
    d.update(model="unet", seed=args.seed, levels=[args.levels[0]])
    d.setdefault("loss", {}).setdefault("lambda2", 0.0)
    base = TrainConfig.from_dict(d)
    train_samples = load_samples(base)
    test_samples = load_samples(base, seed_offset=10_000, count=args.test_count) \
        if base.data.kind == "synthetic" else train_samples
    if base.data.kind != "synthetic":
        log.warning("non-synthetic data: evaluating on the training split")
    result = run_level_study(args.levels, train_samples, test_samples, args.steps, args.seed, args.out,
                             batch_size=base.batch_size, base=base)
    print(result.table_path.read_text(), end="")
    print(f"wrote {result.table_path} and {result.figure_path}")
    return 0


def cmd_gen_synthetic(args) -> int:
    from .color_io import save_image, save_mask
    from .datasets import SyntheticShadowSpec, generate_synthetic

    spec = SyntheticShadowSpec(size=args.size, attenuation=tuple(args.attenuation), coverage=tuple(args.coverage),
                               softness=args.softness, texture=args.texture, seed=args.seed)
    root = Path(args.out)
    for s in generate_synthetic(spec, args.count):
        save_image(s.shadow, root / f"{args.split}_A" / f"{s.id}.png")
        save_mask(s.mask, root / f"{args.split}_B" / f"{s.id}.png")
        save_image(s.free, root / f"{args.split}_C" / f"{s.id}.png")
    print(f"wrote {args.count} triplets under {root}")
    return 0


def cmd_dump_features(args) -> int:
    import torch

    from .color_io import load_image, load_mask
    from .models import set_recording
    from .plotting import save_feature_grid, save_weight_heatmaps
    from .trainer import load_checkpoint, predict

    model, manifest = load_checkpoint(args.checkpoint)
    image = load_image(args.input)
    mask = load_mask(args.mask)
    structure = load_image(args.structure) if args.structure else None
    if manifest["model"] == "structnet_stage2" and structure is None:
        raise ConfigError("dump-features on a stage-2 checkpoint needs --structure")
    layers = set_recording(model, True)
    predict(model, manifest, image, mask, structure=structure)
    out = Path(args.out)
    written = 0
    for name, layer in layers:
        tag = name.replace(".", "_") or "layer"
        if "b" in layer.features:
            save_feature_grid(layer.features["b"][0].numpy(), out / f"{tag}_B.png")
            written += 1
        if "xw" in layer.features:
            save_feature_grid(layer.features["xw"][0].numpy(), out / f"{tag}_XinW.png")
            written += 1
        fusion = getattr(layer, "fusion", None)
        weights = getattr(fusion, "last_weights", None)
        if isinstance(weights, torch.Tensor):
            save_weight_heatmaps(weights[0].numpy(), out / f"{tag}_mfra_weights.png")
            written += 1
    set_recording(model, False)
    print(f"wrote {written} figures under {out}")
    return 0


def cmd_validate_recipes(args) -> int:
    from .recipes import validate_recipes

    report = validate_recipes(args.dir)
    sys.stdout.write(report.to_text())
    return 0 if report.ok else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structnet", description="Structure-guided shadow removal toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("extract-structure", help="RTV structure layer of an image")
    s.add_argument("--input", required=True)
    s.add_argument("--level", type=float, required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_extract_structure)

    s = sub.add_parser("train", help="train a model from a YAML config")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    s.add_argument("--steps", type=int)
    s.add_argument("--out", help="output directory (overrides out_dir)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="region-wise metrics over prediction/ground-truth/mask directories")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True, help="report path stem; writes .txt, .json and .png")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="run a checkpoint on one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--mask")
    s.add_argument("--out", required=True)
    s.add_argument("--stage1", help="stage-1 checkpoint for stage-2 models")
    s.add_argument("--structure", help="precomputed restored structure for stage-2 models")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("level-study", help="one plain UNet per structure level, structure RMSE per region")
    s.add_argument("--levels", type=float, nargs="+", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--test-count", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_level_study)

    s = sub.add_parser("gen-synthetic", help="write a synthetic ISTD-style triplet set")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train")
    s.add_argument("--attenuation", type=float, nargs=2, default=(0.3, 0.8))
    s.add_argument("--coverage", type=float, nargs=2, default=(0.05, 0.4))
    s.add_argument("--softness", type=float, default=1.0)
    s.add_argument("--texture", type=float, default=0.04)
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("dump-features", help="PNG grids of B^j, X_in*W and MFRA weights per layer")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--structure")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dump_features)

    s = sub.add_parser("validate-recipes", help="check recipe files against the ablation grids")
    s.add_argument("--dir", default="recipes")
    s.set_defaults(func=cmd_validate_recipes)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StructNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())

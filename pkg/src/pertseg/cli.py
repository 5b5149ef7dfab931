"""Command-line entry point for the full workflow.

Subcommands: synth, validate, train, eval, overlap, plots.  Training config
precedence is preset < file < environment (PERTSEG_<KEY>) < flags, and every
command echoes its effective configuration into its output directory.  All
randomness flows from --seed through component-named substreams, so sweeps
over seeds are plain shell loops.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import __version__
from .data import SynthSpec, generate_synthetic_dataset, load_manifest, overlap_report
from .diagnostics import emit_plots
from .metrics import (
    cross_dataset_report,
    cross_report_to_dict,
    render_table,
    report_to_dict,
    resolution_groups,
    split_report,
)
from .perturb import FAMILIES, NoiseSpec
from .train import (
    PRESETS,
    TrainConfig,
    build_model,
    evaluate_dataset,
    load_dataset,
    model_from_checkpoint,
    run_training,
    train_eval_parity,
)

ENV_PREFIX = "PERTSEG_"


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"cannot parse boolean from {value!r}")


# Train-config keys that may come from preset/file/env/flags.
_SCALAR_KEYS = {
    "train_manifest": str,
    "out_dir": str,
    "embed_dim": int,
    "patch_stride": int,
    "encoder_namespace": str,
    "template": str,
    "feature_dim": int,
    "num_blocks": int,
    "window": int,
    "text_init_scale": float,
    "reduction_ratio": int,
    "use_text_perturb": _parse_bool,
    "use_image_perturb": _parse_bool,
    "zero_image_perturb": _parse_bool,
    "total_steps": int,
    "batch_size": int,
    "base_lr": float,
    "warmup_steps": int,
    "weight_decay": float,
    "grad_clip": float,
    "seed": int,
    "log_every": int,
    "diag_every": int,
    "diag_draws": int,
    "checkpoint_every": int,
    "ignore_index": int,
}
_FLAGLESS_KEYS = {"use_text_perturb", "use_image_perturb", "zero_image_perturb"}


def _env_overrides() -> dict:
    found = {}
    for key, parse in _SCALAR_KEYS.items():
        raw = os.environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            found[key] = parse(raw)
    return found


def _write_effective_config(out_dir: Path, payload: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _build_train_config(args: argparse.Namespace) -> TrainConfig:
    merged: dict = {}
    if args.preset:
        merged.update(PRESETS[args.preset])
    if args.config:
        merged.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
    merged.update(_env_overrides())
    for key in _SCALAR_KEYS:
        if key in _FLAGLESS_KEYS:
            continue
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        if key not in _SCALAR_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        merged[key] = _SCALAR_KEYS[key](value)
    if args.disable_text_perturb:
        merged["use_text_perturb"] = False
    if args.disable_image_perturb:
        merged["use_image_perturb"] = False
    if args.zero_image_perturb:
        merged["zero_image_perturb"] = True

    config = TrainConfig.from_dict(merged)

    text_family = args.text_noise_family or args.noise_family
    image_family = args.image_noise_family or args.noise_family
    standardized = not args.unstandardized_noise
    if args.df is not None and "student_t" not in ((text_family or ""), (image_family or "")):
        raise ValueError("--df requires a student_t noise family")
    if text_family:
        config = dataclasses.replace(
            config,
            text_noise=NoiseSpec(text_family, args.df if text_family == "student_t" else None, standardized),
        )
    if image_family:
        config = dataclasses.replace(
            config,
            image_noise=NoiseSpec(image_family, args.df if image_family == "student_t" else None, standardized),
        )
    return config


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        num_images=args.images,
        size=args.size,
        num_classes=args.classes,
        shapes_per_image=(args.min_shapes, args.max_shapes),
        holdout_classes=args.holdout,
        test_images=args.test_images,
        patch_stride=args.patch_stride,
        embed_dim=args.embed_dim,
        namespace=args.namespace,
        shape_kinds=tuple(args.shape_kinds.split(",")),
    )
    out_dir = Path(args.out)
    manifests = generate_synthetic_dataset(spec, out_dir, args.seed)
    _write_effective_config(out_dir, {"command": "synth", "seed": args.seed, "spec": dataclasses.asdict(spec)})
    for name, path in manifests.items():
        print(f"{name} manifest: {path}")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    failures = 0
    for manifest_path in args.manifest:
        try:
            manifest = load_manifest(Path(manifest_path), scan_masks=True)
        except (ValueError, FileNotFoundError, KeyError) as err:
            print(f"FAIL {manifest_path}: {err}")
            failures += 1
            continue
        print(
            f"OK   {manifest_path}: dataset={manifest.dataset_id} images={len(manifest.pairs)} "
            f"classes={manifest.num_classes} "
            f"native={manifest.native_resolution[0]:g}x{manifest.native_resolution[1]:g}"
        )
    return 1 if failures else 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _build_train_config(args)
    _write_effective_config(Path(config.out_dir), config.to_dict())
    if args.parity_check or config.zero_image_perturb:
        model = build_model(config)
        data = load_dataset(config.train_manifest, config)
        identical = train_eval_parity(model, data, config)
        print(f"train/eval forward parity at init: {'identical' if identical else 'DIFFERENT'}")
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "parity.json").write_text(
            json.dumps({"train_eval_identical_at_init": identical}, indent=2) + "\n", encoding="utf-8"
        )
    result = run_training(config)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics log: {result.log_path}")
    if result.final_loss is not None:
        print(f"final loss: {result.final_loss:.6f}")
    return 0


def _parse_names(raw: str | None) -> tuple[str, ...]:
    if not raw:
        return ()
    return tuple(name.strip() for name in raw.split(",") if name.strip())


def _render_eval_figure(reports, out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4.0, 1.5 * len(reports)), 3.2))
    ax.bar([r.dataset_id for r in reports], [100 * r.miou for r in reports], width=0.5)
    ax.set_ylabel("mIoU (%)")
    ax.set_ylim(0, 100)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / "miou_by_dataset.png", dpi=120)
    plt.close(fig)


def cmd_eval(args: argparse.Namespace) -> int:
    model, config = model_from_checkpoint(Path(args.checkpoint))
    if args.embed_dim is not None and args.embed_dim != config.embed_dim:
        raise ValueError(
            f"checkpoint was trained with embed_dim={config.embed_dim}, cannot evaluate at {args.embed_dim}"
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seen = _parse_names(args.seen)
    unseen = _parse_names(args.unseen)

    reports = []
    for manifest_path in args.manifest:
        stem_dir = Path(manifest_path).stem
        report = evaluate_dataset(
            model,
            manifest_path,
            config,
            use_manifest_split=not (seen or unseen),
            maps_dir=out_dir / "maps" / stem_dir if args.save_maps else None,
            logits_dir=out_dir / "logits" / stem_dir if args.dump_logits else None,
        )
        if seen or unseen:
            split_report(report, seen, unseen)
        reports.append(report)
        stem = report.dataset_id or Path(manifest_path).stem
        (out_dir / f"{stem}.json").write_text(
            json.dumps(report_to_dict(report), indent=2) + "\n", encoding="utf-8"
        )
        (out_dir / f"{stem}.txt").write_text(render_table(report), encoding="utf-8")
        with (out_dir / f"{stem}.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "iou", "acc", "gt_pixels", "pred_pixels"])
            for s in report.classes:
                writer.writerow([s.name, s.iou, s.acc, s.gt_pixels, s.pred_pixels])
        print(render_table(report))

    groups = None
    if args.resolution_groups:
        groups = resolution_groups([(r.dataset_id, *r.native_resolution) for r in reports])
    cross = cross_dataset_report(reports, groups)
    (out_dir / "cross_dataset.json").write_text(
        json.dumps(cross_report_to_dict(cross), indent=2) + "\n", encoding="utf-8"
    )
    print(f"m-mIoU {100 * cross.m_miou:.2f}  m-mACC {100 * cross.m_macc:.2f}")
    if groups:
        for group, entry in cross.resolution_means.items():
            print(f"{group}-resolution m-mIoU {100 * entry['m_miou']:.2f}  m-mACC {100 * entry['m_macc']:.2f}")

    _render_eval_figure(reports, out_dir)
    _write_effective_config(
        out_dir, {"command": "eval", "checkpoint": str(args.checkpoint), "config": config.to_dict()}
    )
    return 0


def cmd_overlap(args: argparse.Namespace) -> int:
    train_vocab = [
        line.strip()
        for line in Path(args.train_vocab).read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.strip().startswith("#")
    ]
    manifests = [load_manifest(Path(p), scan_masks=False) for p in args.manifest]
    entries = overlap_report(train_vocab, manifests)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "overlap.json").write_text(
        json.dumps([dataclasses.asdict(e) for e in entries], indent=2) + "\n", encoding="utf-8"
    )
    with (out_dir / "overlap.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "raw_unique", "covered", "test_only", "coverage_ratio"])
        for e in entries:
            writer.writerow([e.dataset_id, e.raw_unique, e.covered, e.test_only, f"{e.coverage_ratio:.6f}"])
    for e in entries:
        print(
            f"{e.dataset_id}: raw={e.raw_unique} covered={e.covered} "
            f"test_only={e.test_only} coverage={e.coverage_ratio:.2%}"
        )

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(entries)), 3.5))
    xs = range(len(entries))
    ax.bar([x - 0.2 for x in xs], [e.covered for e in entries], width=0.4, label="covered")
    ax.bar([x + 0.2 for x in xs], [e.test_only for e in entries], width=0.4, label="test-only")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([e.dataset_id for e in entries], rotation=30, ha="right")
    ax.set_ylabel("categories")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "overlap.png", dpi=120)
    plt.close(fig)
    _write_effective_config(out_dir, {"command": "overlap", "train_vocab": str(args.train_vocab)})
    return 0


def cmd_plots(args: argparse.Namespace) -> int:
    written = emit_plots(Path(args.log), Path(args.out))
    if not written:
        print("no delta statistics found; nothing plotted", file=sys.stderr)
        return 0
    for path in written:
        print(path)
    _write_effective_config(Path(args.out), {"command": "plots", "log": str(args.log)})
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pertseg", description="open-vocabulary segmentation workflow")
    parser.add_argument("--version", action="version", version=f"pertseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a procedural synthetic dataset")
    p.add_argument("--images", type=int, required=True, help="number of training images")
    p.add_argument("--classes", type=int, default=4, help="class count including background")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--min-shapes", type=int, default=1)
    p.add_argument("--max-shapes", type=int, default=3)
    p.add_argument("--holdout", type=int, default=0, help="classes that appear only in test images")
    p.add_argument("--test-images", type=int, default=0)
    p.add_argument("--patch-stride", type=int, default=4)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--namespace", type=str, default="synthetic-vlm")
    p.add_argument("--shape-kinds", type=str, default="rect,ellipse")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="validate dataset manifests")
    p.add_argument("manifest", nargs="+")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--config", type=str, help="JSON config file (see docs/formats.md)")
    p.add_argument("--preset", type=str, choices=sorted(PRESETS), help="named defaults, e.g. desk")
    for key, parse in _SCALAR_KEYS.items():
        if key in _FLAGLESS_KEYS:
            continue
        flag = "--" + key.replace("_", "-")
        p.add_argument(flag, type=parse, default=None)
    p.add_argument("--noise-family", choices=FAMILIES, default=None, help="noise family for both branches")
    p.add_argument("--text-noise-family", choices=FAMILIES, default=None)
    p.add_argument("--image-noise-family", choices=FAMILIES, default=None)
    p.add_argument("--df", type=float, default=None, help="student_t degrees of freedom")
    p.add_argument(
        "--unstandardized-noise", action="store_true", help="unit-scale families instead of unit variance"
    )
    p.add_argument("--disable-text-perturb", action="store_true")
    p.add_argument("--disable-image-perturb", action="store_true")
    p.add_argument(
        "--zero-image-perturb", action="store_true", help="zero every image-perturbation weight at init"
    )
    p.add_argument("--parity-check", action="store_true", help="report train/eval forward parity before training")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one or more manifests")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--seen", type=str, default=None, help="comma-separated seen class names")
    p.add_argument("--unseen", type=str, default=None, help="comma-separated unseen class names")
    p.add_argument("--resolution-groups", action="store_true", help="add low/high native-resolution group means")
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--save-maps", action="store_true", help="write predicted maps as 8-bit indexed PNGs")
    p.add_argument("--dump-logits", action="store_true", help="debug: dump per-image logits as float32 .npy")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlap", help="test-centric category overlap analysis")
    p.add_argument("--train-vocab", type=str, required=True, help="text file, one category per line")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_overlap)

    p = sub.add_parser("plots", help="render delta-statistic curves from a metrics log")
    p.add_argument("--log", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_plots)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

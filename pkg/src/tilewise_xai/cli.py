"""Command-line entry point.

One binary with subcommands sharing a TOML config schema:

  gen-data    write the synthetic slide dataset
  train-seg   train the segmentation annotation oracle
  train-mil   pretrain the backbone and train the slide-level classifier
  explain     attribution heatmap + mask + JSON record for one tile image
  evaluate    full pipeline: data, training, scored explanation sweep
  stability   shifted-grid agreement study
  baseline    closed-form and Monte Carlo scores for structureless maps

Every artifact-producing run writes the fully resolved config next to its
outputs. Exit codes: 0 success, 1 runtime failure, 2 bad configuration; both
failure modes print a single `error: <category>: <message>` line.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .engine import EngineError
from .harness import (
    ConfigError,
    DEFAULT_SHIFTS,
    PipelineError,
    ensure_dataset,
    ensure_mil,
    ensure_segnet,
    load_config,
    prepare_mil,
    run_pipeline,
    run_stability_study,
    write_json,
    write_resolved,
)
from .harness.pipeline import _load_split_bags
from .metrics import MetricError, uniform_baseline, uniform_baseline_mc
from .nets import NetError
from .synthdata.dataio import DataError, load_png, save_gray_png, save_mask_pgm
from .synthdata.slides import SlideError
from .synthdata.tiling import TilingError
from .xai import AGGREGATORS, XaiError, explain_tile, to_uint8

ENV_OUT = "TILEWISE_XAI_OUT"


def _parse_layers(text: str):
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tilewise-xai",
        description="Contextual attribution toolkit for tile classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", metavar="PATH",
                        help="TOML config file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--out", metavar="DIR",
                        help=f"output directory (or ${ENV_OUT})")
        sp.add_argument("--threads", type=int, help="worker cap; 1 = serial")
        sp.add_argument("overrides", nargs="*", metavar="section.key=value",
                        help="config overrides applied after the file")

    add_common(sub.add_parser("gen-data", help="generate the synthetic dataset"))
    add_common(sub.add_parser("train-seg", help="train the segmentation oracle"))
    add_common(sub.add_parser("train-mil", help="train the slide classifier"))

    sp = sub.add_parser("explain", help="explain one tile image")
    add_common(sp)
    sp.add_argument("--tile", required=True, metavar="PATH",
                    help="tile image (PNG) to explain")
    sp.add_argument("--agg", choices=AGGREGATORS, default="abs",
                    help="channel aggregator")
    sp.add_argument("--t", type=float, default=0.9, help="mask threshold")
    sp.add_argument("--layers", type=_parse_layers, metavar="N,N,...",
                    help="tapped layers (default from config)")

    add_common(sub.add_parser("evaluate", help="run the full scored pipeline"))

    sp = sub.add_parser("stability", help="shifted-grid agreement study")
    add_common(sp)
    sp.add_argument("--shift", choices=("01", "10", "11"),
                    help="restrict to one shifted grid (default: all three)")
    sp.add_argument("--t", type=float, help="override stability.threshold")
    sp.add_argument("--agg", choices=AGGREGATORS,
                    help="override stability.aggregator")

    sp = sub.add_parser("baseline", help="structureless-attribution scores")
    add_common(sp)
    sp.add_argument("--t", type=float, default=0.9, help="mask threshold")
    sp.add_argument("--trials", type=int, default=200,
                    help="Monte Carlo trials")
    sp.add_argument("--size", type=int, default=64,
                    help="Monte Carlo map side length")
    return parser


def _build_config(args):
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if not cfg.out_dir and os.environ.get(ENV_OUT):
        cfg = replace(cfg, out_dir=os.environ[ENV_OUT])
    if getattr(args, "t", None) is not None and args.command == "stability":
        cfg = replace(cfg, stability_threshold=args.t)
    if getattr(args, "agg", None) is not None and args.command == "stability":
        cfg = replace(cfg, stability_aggregator=args.agg)
    if args.command != "baseline" and not cfg.out_dir:
        raise ConfigError(
            f"no output directory: pass --out, set run.out_dir, or ${ENV_OUT}")
    return cfg


def _out(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(cfg, args) -> int:
    out = _out(cfg)
    write_resolved(cfg, out)
    manifest = ensure_dataset(cfg, out)
    n = sum(len(v) for v in manifest["splits"].values())
    print(f"dataset ready: {n} slides under {out / 'data'}")
    return 0


def cmd_train_seg(cfg, args) -> int:
    out = _out(cfg)
    write_resolved(cfg, out)
    manifest = ensure_dataset(cfg, out)
    train_bags, _ = _load_split_bags(cfg, out, manifest, "train")
    ensure_segnet(cfg, out, train_bags)
    print(f"segmentation checkpoint: {out / 'checkpoints' / 'segnet.npz'}")
    return 0


def cmd_train_mil(cfg, args) -> int:
    out = _out(cfg)
    write_resolved(cfg, out)
    manifest = ensure_dataset(cfg, out)
    train_bags, train_labels = _load_split_bags(cfg, out, manifest, "train")
    val_bags, val_labels = _load_split_bags(cfg, out, manifest, "val")
    _, auc = ensure_mil(cfg, out, train_bags, train_labels, val_bags, val_labels)
    print(f"classifier checkpoint: {out / 'checkpoints' / 'mil.npz'}")
    print(f"val_slide_auc={'nan' if auc is None else format(auc, '.6f')}")
    return 0


def cmd_explain(cfg, args) -> int:
    out = _out(cfg)
    write_resolved(cfg, out)
    tile = load_png(args.tile)
    if tile.shape[0] != cfg.tile_size or tile.shape[1] != cfg.tile_size:
        raise PipelineError(
            f"tile is {tile.shape[1]}x{tile.shape[0]} but the classifier "
            f"expects {cfg.tile_size}x{cfg.tile_size}")
    clf = prepare_mil(cfg, out)
    layers = args.layers if args.layers else cfg.xai_layers
    xcfg = replace(cfg.xai_config(args.agg), layers=tuple(layers),
                   thresholds=(args.t,))
    explanation = explain_tile(clf, tile, xcfg)
    mask = explanation.masks[float(args.t)]
    dest = out / "explain" / f"{Path(args.tile).stem}_{args.agg}"
    dest.mkdir(parents=True, exist_ok=True)
    save_gray_png(dest / "heatmap.png", to_uint8(explanation.normalized))
    save_mask_pgm(dest / "mask.pgm", mask)
    write_json(dest / "record.json", {
        "schema": "explain-v1",
        "tile": str(args.tile),
        "aggregator": args.agg,
        "layers": list(layers),
        "threshold": args.t,
        "prediction": explanation.prediction,
        "mask_popcount": int(mask.sum()),
    })
    print(f"explanation written under {dest}")
    print(f"prediction={explanation.prediction:.6f}")
    return 0


def cmd_evaluate(cfg, args) -> int:
    summary = run_pipeline(cfg)
    for warning in summary["warnings"]:
        print(f"warning: {warning}")
    auc = summary["mil"]["val_slide_auc"]
    print(f"val_slide_auc={'nan' if auc is None else format(auc, '.6f')}")
    print(f"scored tiles: {summary['dataset']['test_tiles']}")
    print(f"outputs under {cfg.out_dir}")
    return 0


def cmd_stability(cfg, args) -> int:
    if args.shift is None:
        shifts = DEFAULT_SHIFTS
    else:
        shifts = ((int(args.shift[0]), int(args.shift[1])),)
    rows, section = run_stability_study(cfg, shifts)
    print(f"pairs: {section['pairs_total']} "
          f"(included {section['pairs_included']}, "
          f"floor {section['excluded']['floor']}, "
          f"empty-union {section['excluded']['empty-union']})")
    mean = section["mean_iou"]
    print(f"mean_iou={'nan' if mean is None else format(mean, '.6f')}")
    return 0


def cmd_baseline(cfg, args) -> int:
    closed = uniform_baseline(args.t)
    print(f"iou={closed.iou:.6f}")
    print(f"precision={closed.precision:.6f}")
    mc = uniform_baseline_mc(args.t, size=args.size, trials=args.trials,
                             seed=cfg.seed)
    print(f"mc_iou={mc.iou_mean:.6f} stderr={mc.iou_stderr:.6f}")
    print(f"mc_precision={mc.precision_mean:.6f} stderr={mc.precision_stderr:.6f}")
    print(f"trials={mc.trials} size={args.size}")
    if cfg.out_dir:
        write_resolved(cfg, _out(cfg))
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-seg": cmd_train_seg,
    "train-mil": cmd_train_mil,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "stability": cmd_stability,
    "baseline": cmd_baseline,
}

_RUNTIME_ERRORS = (PipelineError, DataError, NetError, XaiError, MetricError,
                   SlideError, TilingError, EngineError, OSError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _build_config(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Shifted-grid stability study.

For every test slide the base tile grid is joined by grids shifted a quarter
tile along x, y, or both. Every cross-grid tile pair with a non-empty overlap
rectangle yields a record: both tiles' explanation masks are computed on the
full tiles (never re-normalized on the crop), restricted to the overlap, and
compared by IoU. Pairs where either prediction is at or below the floor, or
where both cropped masks are empty, are kept in the table but flagged and
left out of the binned means.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..metrics import binned_summary, iou_score
from ..nets import TileClassifier
from ..synthdata.dataio import load_slide
from ..synthdata.tiling import Tile, crop_to_rectangle, overlap_rectangle, tile_grid
from ..xai import explain_tile
from .config import ExperimentConfig, write_resolved
from .pipeline import (
    PipelineError,
    _digest_matches,
    _load_split_bags,
    _merge_summary,
    _require_out_dir,
    _train_digest,
    ensure_dataset,
    ensure_mil,
)
from .reports import STABILITY_COLUMNS, STABILITY_SCHEMA, parallel_map, write_csv

DEFAULT_SHIFTS: Tuple[Tuple[int, int], ...] = ((0, 1), (1, 0), (1, 1))

# bin edges chosen so the exact overlap fractions a quarter-tile shift can
# produce ({1/16, 3/16, 1/4, 9/16, 3/4}) each land in their own bin
OVERLAP_BIN_EDGES = (0.0, 0.1, 0.2, 0.3, 0.6, 1.0)
PREDICTION_DIFF_BIN_EDGES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0)
AREA_BIN_EDGES = (0.0, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)


def overlap_pair(tile_a: Tile, prediction_a: float, mask_a: np.ndarray,
                 tile_b: Tile, prediction_b: float, mask_b: np.ndarray,
                 tile_size: int, floor: float) -> Optional[dict]:
    """Stability record for two tiles, or None when they do not overlap.

    IoU is computed on the overlap crops of masks that were thresholded on
    the full tiles. The record is symmetric in the two tiles up to the a/b
    column naming.
    """
    rect = overlap_rectangle(tile_a, tile_b, tile_size)
    if rect is None:
        return None
    x0, y0, x1, y1 = rect
    crop_a = crop_to_rectangle(mask_a, tile_a, rect)
    crop_b = crop_to_rectangle(mask_b, tile_b, rect)
    excluded = ""
    if prediction_a <= floor or prediction_b <= floor:
        excluded = "floor"
    iou = iou_score(crop_a, crop_b)
    if iou is None and not excluded:
        excluded = "empty-union"
    area = (x1 - x0) * (y1 - y0)
    return {
        "tile_a": tile_a.tile_id,
        "tile_b": tile_b.tile_id,
        "overlap_x0": x0, "overlap_y0": y0,
        "overlap_x1": x1, "overlap_y1": y1,
        "overlap_area": area,
        "overlap_fraction": area / float(tile_size * tile_size),
        "prediction_a": float(prediction_a),
        "prediction_b": float(prediction_b),
        "prediction_diff": abs(float(prediction_a) - float(prediction_b)),
        "area_fraction_a": float(crop_a.mean()),
        "area_fraction_b": float(crop_b.mean()),
        "iou": iou,
        "excluded": excluded,
    }


def _explained_grid(config: ExperimentConfig, clf: TileClassifier, slide,
                    shift: Tuple[int, int]) -> Tuple[str, List[dict]]:
    """One grid's tiles with their full-tile explanation mask and prediction."""
    grid = config.grid_spec(shift)
    bag = tile_grid(slide, grid)
    xcfg = config.xai_config(config.stability_aggregator)
    entries = []
    for tile in bag.tiles:
        explanation = explain_tile(clf, tile.image, xcfg,
                                   thresholds=(config.stability_threshold,))
        entries.append({
            "tile": tile,
            "prediction": explanation.prediction,
            "mask": explanation.masks[float(config.stability_threshold)],
        })
    return grid.tag(), entries


def _slide_pairs(config: ExperimentConfig, out: Path, entry: dict,
                 clf: TileClassifier,
                 shifts: Sequence[Tuple[int, int]]) -> List[dict]:
    """All cross-grid overlap records for one slide, in deterministic order."""
    slide = load_slide(out / "data" / entry["path"])
    all_shifts = [(0, 0)] + [tuple(s) for s in shifts]
    grids: Dict[str, List[dict]] = {}
    tags: List[Tuple[str, Tuple[int, int]]] = []
    for shift in all_shifts:
        tag, entries = _explained_grid(config, clf, slide, shift)
        grids[tag] = entries
        tags.append((tag, shift))
    L = config.tile_size
    rows: List[dict] = []
    for i in range(len(tags)):
        for j in range(i + 1, len(tags)):
            tag_a, shift_a = tags[i]
            tag_b, shift_b = tags[j]
            for ea in grids[tag_a]:
                for eb in grids[tag_b]:
                    pair = overlap_pair(ea["tile"], ea["prediction"], ea["mask"],
                                        eb["tile"], eb["prediction"], eb["mask"],
                                        L, config.prediction_floor)
                    if pair is None:
                        continue
                    pair.update({
                        "slide_seed": slide.seed,
                        "grid_a": tag_a,
                        "grid_b": tag_b,
                        "delta_x": shift_b[0] - shift_a[0],
                        "delta_y": shift_b[1] - shift_a[1],
                    })
                    rows.append(pair)
    return rows


def _bins_payload(xs: Sequence[float], ys: Sequence[float],
                  edges: Sequence[float]) -> List[dict]:
    return [
        {"lo": b.lo, "hi": b.hi, "count": b.count, "mean": b.mean, "std": b.std}
        for b in binned_summary(xs, ys, edges)
    ] if xs else [
        {"lo": lo, "hi": hi, "count": 0, "mean": None, "std": None}
        for lo, hi in zip(edges, edges[1:])
    ]


def summarize_pairs(rows: Sequence[dict]) -> dict:
    """Exclusion bookkeeping plus IoU means binned three ways."""
    included = [r for r in rows if not r["excluded"]]
    ious = [r["iou"] for r in included]
    overlap = [r["overlap_fraction"] for r in included]
    pred_diff = [r["prediction_diff"] for r in included]
    # symmetric in the pair: mean of the two masks' in-overlap fractions
    area = [0.5 * (r["area_fraction_a"] + r["area_fraction_b"]) for r in included]
    return {
        "pairs_total": len(rows),
        "pairs_included": len(included),
        "excluded": {
            "floor": sum(1 for r in rows if r["excluded"] == "floor"),
            "empty-union": sum(1 for r in rows if r["excluded"] == "empty-union"),
        },
        "mean_iou": float(np.mean(ious)) if ious else None,
        "by_overlap_fraction": _bins_payload(overlap, ious, OVERLAP_BIN_EDGES),
        "by_prediction_diff": _bins_payload(pred_diff, ious, PREDICTION_DIFF_BIN_EDGES),
        "by_area_fraction": _bins_payload(area, ious, AREA_BIN_EDGES),
    }


def run_stability_study(config: ExperimentConfig,
                        shifts: Sequence[Tuple[int, int]] = DEFAULT_SHIFTS
                        ) -> Tuple[List[dict], dict]:
    """Full study over the test split; writes stability.csv and the summary."""
    for shift in shifts:
        if tuple(shift) not in ((0, 1), (1, 0), (1, 1)):
            raise PipelineError(f"invalid stability shift {shift}")
    if not shifts:
        raise PipelineError("at least one shifted grid is required")
    out = _require_out_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(config, out)
    manifest = ensure_dataset(config, out)
    clf = prepare_mil(config, out, manifest)
    entries = manifest["splits"]["test"]
    per_slide = parallel_map(
        lambda entry: _slide_pairs(config, out, entry, clf, shifts),
        entries, config.threads)
    rows = [row for slide_rows in per_slide for row in slide_rows]
    section = summarize_pairs(rows)
    section["threshold"] = config.stability_threshold
    section["aggregator"] = config.stability_aggregator
    section["prediction_floor"] = config.prediction_floor
    section["shifts"] = [list(s) for s in shifts]
    write_csv(out / "stability.csv", STABILITY_SCHEMA, STABILITY_COLUMNS, rows)
    _merge_summary(out / "summary.json", {"stability": section})
    return rows, section


def prepare_mil(config: ExperimentConfig, out: Path,
                manifest: Optional[dict] = None) -> TileClassifier:
    """Load the trained classifier, training it first when missing."""
    ckpt = out / "checkpoints" / "mil.npz"
    if ckpt.exists():
        clf, extra = TileClassifier.load(ckpt)
        if (clf.tile_size == config.tile_size
                and _digest_matches(extra, _train_digest(config, "mil_"))):
            return clf
    if manifest is None:
        manifest = ensure_dataset(config, out)
    train_bags, train_labels = _load_split_bags(config, out, manifest, "train")
    val_bags, val_labels = _load_split_bags(config, out, manifest, "val")
    clf, _ = ensure_mil(config, out, train_bags, train_labels,
                        val_bags, val_labels)
    return clf

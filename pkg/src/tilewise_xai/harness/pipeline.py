"""End-to-end experiment: data generation, training, explanation scoring.

`run_pipeline` is deterministic given its config: it (re)uses the dataset and
checkpoints under the output directory when they match the config, scores
every test tile with every channel aggregator against both ground-truth
sources, and writes `scores.csv`, `summary.json`, heatmap images and the
resolved config. Training divergence (non-finite loss) aborts with a
diagnostic rather than producing silent garbage.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..metrics import (
    intersection_score,
    mann_whitney_auc,
    precision_score,
    spearman_rho,
)
from ..nets import (
    MilModel,
    SegNet,
    TileClassifier,
    mil_forward,
    mil_train_epoch,
    pretrain_epoch,
    seg_train_epoch,
)
from ..synthdata.dataio import (
    DatasetSpec,
    SPLIT_NAMES,
    generate_dataset,
    load_manifest,
    load_slide,
    save_gray_png,
)
from ..synthdata.tiling import TileBag, tile_grid
from ..xai import AGGREGATORS, explain_tile, to_uint8
from .config import ExperimentConfig, write_resolved
from .reports import SCORES_COLUMNS, SCORES_SCHEMA, parallel_map, write_csv, write_json

GT_SOURCES = ("manual-proxy", "segnet")


class PipelineError(RuntimeError):
    """Unrecoverable pipeline failure (divergence, missing artifacts)."""


def _require_out_dir(config: ExperimentConfig) -> Path:
    if not config.out_dir:
        raise PipelineError("no output directory configured (run.out_dir)")
    return Path(config.out_dir)


# ---------------------------------------------------------------------------
# dataset


def _manifest_matches(manifest: dict, spec: DatasetSpec) -> bool:
    if manifest.get("dataset_seed") != spec.seed:
        return False
    if manifest.get("lesion_count_range") != list(spec.lesion_count_range):
        return False
    if manifest.get("negative_every") != list(spec.negative_every):
        return False
    if manifest.get("slide_params") != asdict(spec.params):
        return False
    sizes = spec.split_sizes()
    splits = manifest.get("splits", {})
    return all(len(splits.get(s, ())) == sizes[s] for s in SPLIT_NAMES)


def ensure_dataset(config: ExperimentConfig, out: Path) -> dict:
    """Generate the dataset under out/data unless a matching one exists."""
    spec = config.dataset_spec()
    data_dir = out / "data"
    if (data_dir / "manifest.json").exists():
        try:
            manifest = load_manifest(data_dir)
        except Exception:
            manifest = None
        if manifest is not None and _manifest_matches(manifest, spec):
            return manifest
        shutil.rmtree(data_dir)
    return generate_dataset(data_dir, spec)


def _load_split_bags(config: ExperimentConfig, out: Path, manifest: dict,
                     split: str) -> Tuple[List[TileBag], List[int]]:
    grid = config.grid_spec()
    bags: List[TileBag] = []
    labels: List[int] = []
    for entry in manifest["splits"][split]:
        slide = load_slide(out / "data" / entry["path"])
        bags.append(tile_grid(slide, grid))
        labels.append(int(entry["label"]))
    return bags, labels


# ---------------------------------------------------------------------------
# training


def _check_finite(loss: float, what: str, epoch: int, lr: float) -> None:
    if not np.isfinite(loss):
        raise PipelineError(
            f"{what} training diverged: loss={loss} at epoch {epoch} "
            f"(lr={lr}); lower the learning rate")


_DATA_FIELDS = ("seed", "slides_train", "slides_val", "slides_test",
                "slide_size", "tile_size", "lesion_count_min",
                "lesion_count_max", "lesion_radius_min", "lesion_radius_max")


def _train_digest(config: ExperimentConfig, prefix: str) -> np.ndarray:
    """Fingerprint of every config field that shaped a checkpoint.

    Stored inside the checkpoint so a rerun with different training or data
    settings retrains instead of silently reusing a stale model.
    """
    keys = list(_DATA_FIELDS)
    keys += [f.name for f in fields(config) if f.name.startswith(prefix)]
    payload = json.dumps({k: getattr(config, k) for k in sorted(keys)})
    raw = hashlib.sha256(payload.encode("utf-8")).digest()
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def _digest_matches(extra: Dict[str, np.ndarray], want: np.ndarray) -> bool:
    got = extra.get("config_digest")
    return got is not None and got.shape == want.shape and bool((got == want).all())


def train_segnet(config: ExperimentConfig, bags: Sequence[TileBag]
                 ) -> Tuple[SegNet, List[float]]:
    """Dice-loss training on every kept training tile; returns epoch losses."""
    model = SegNet(base_width=config.seg_base_width, seed=config.seg_model_seed)
    tiles = [t.image for bag in bags for t in bag.tiles]
    masks = [t.mask for bag in bags for t in bag.tiles]
    losses: List[float] = []
    if not tiles:
        return model, losses
    rng = np.random.default_rng([config.seed, 101])
    for epoch in range(config.seg_epochs):
        order = rng.permutation(len(tiles))
        loss = seg_train_epoch(model, [tiles[i] for i in order],
                               [masks[i] for i in order], config.seg_lr)
        _check_finite(loss, "segmentation", epoch, config.seg_lr)
        losses.append(float(loss))
    return model, losses


def ensure_segnet(config: ExperimentConfig, out: Path,
                  train_bags: Sequence[TileBag]) -> SegNet:
    ckpt = out / "checkpoints" / "segnet.npz"
    digest = _train_digest(config, "seg_")
    if ckpt.exists():
        model, extra = SegNet.load(ckpt)
        if model.base_width == config.seg_base_width and _digest_matches(extra, digest):
            return model
    model, losses = train_segnet(config, train_bags)
    extra = {"train_loss": np.asarray(losses, dtype=np.float64),
             "config_digest": digest}
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model.save(ckpt, extra=extra)
    return model


def _aux_tile_labels(config: ExperimentConfig, bags: Sequence[TileBag]
                     ) -> Tuple[list, List[int]]:
    """Weak per-tile labels for backbone pretraining.

    A tile counts as positive when its annotated fraction reaches the
    configured cut, negative when it is exactly zero; ambiguous tiles in
    between are dropped.
    """
    tiles, labels = [], []
    cut = config.mil_aux_positive_fraction
    for bag in bags:
        for t in bag.tiles:
            frac = t.annotated_fraction
            if frac >= cut:
                tiles.append(t.image)
                labels.append(1)
            elif frac == 0.0:
                tiles.append(t.image)
                labels.append(0)
    return tiles, labels


def train_mil(config: ExperimentConfig, bags: Sequence[TileBag],
              labels: Sequence[int]) -> Tuple[TileClassifier, List[float]]:
    """Backbone pretraining on weak tile labels, then frozen-backbone
    slide-level training of a reinitialized head."""
    clf = TileClassifier(tile_size=config.tile_size, seed=config.mil_model_seed)
    rng = np.random.default_rng([config.seed, 202])
    tiles, tile_labels = _aux_tile_labels(config, bags)
    for epoch in range(config.mil_pretrain_epochs):
        if not tiles:
            break
        order = rng.permutation(len(tiles))
        loss = pretrain_epoch(clf, [tiles[i] for i in order],
                              [tile_labels[i] for i in order],
                              config.mil_pretrain_lr)
        _check_finite(loss, "backbone pretraining", epoch, config.mil_pretrain_lr)
    clf.frozen_backbone = True
    clf.reinit_head(config.mil_model_seed + 1)
    model = MilModel(clf)
    losses: List[float] = []
    for epoch in range(config.mil_epochs):
        if not bags:
            break
        order = rng.permutation(len(bags))
        loss = mil_train_epoch(model, [bags[i] for i in order],
                               [labels[i] for i in order], config.mil_lr)
        _check_finite(loss, "slide-level", epoch, config.mil_lr)
        losses.append(float(loss))
    return clf, losses


def val_slide_auc(clf: TileClassifier, bags: Sequence[TileBag],
                  labels: Sequence[int]) -> Optional[float]:
    """Slide-score ROC AUC; None when a class is missing or a bag is empty."""
    model = MilModel(clf)
    pos, neg = [], []
    for bag, label in zip(bags, labels):
        if not bag.tiles:
            return None
        score, _, _ = mil_forward(model, bag)
        (pos if label == 1 else neg).append(score)
    if not pos or not neg:
        return None
    return float(mann_whitney_auc(pos, neg))


def ensure_mil(config: ExperimentConfig, out: Path,
               train_bags: Sequence[TileBag], train_labels: Sequence[int],
               val_bags: Sequence[TileBag], val_labels: Sequence[int]
               ) -> Tuple[TileClassifier, Optional[float]]:
    ckpt = out / "checkpoints" / "mil.npz"
    digest = _train_digest(config, "mil_")
    if ckpt.exists():
        clf, extra = TileClassifier.load(ckpt)
        if clf.tile_size == config.tile_size and _digest_matches(extra, digest):
            auc = extra.get("val_slide_auc")
            return clf, (float(auc[0]) if auc is not None and auc.size else None)
    clf, _ = train_mil(config, train_bags, train_labels)
    auc = val_slide_auc(clf, val_bags, val_labels)
    extra = {"config_digest": digest}
    if auc is not None:
        extra["val_slide_auc"] = np.array([auc])
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    clf.save(ckpt, extra=extra)
    return clf, auc


# ---------------------------------------------------------------------------
# explanation scoring


def _score_slide(config: ExperimentConfig, out: Path, entry: dict,
                 clf: TileClassifier, seg: SegNet
                 ) -> Tuple[List[dict], List[dict]]:
    """CSV rows and faithfulness records for one test slide."""
    slide = load_slide(out / "data" / entry["path"])
    bag = tile_grid(slide, config.grid_spec())
    heat_dir = out / "heatmaps"
    rows: List[dict] = []
    records: List[dict] = []
    for tile in bag.tiles:
        seg_mask = seg.predicted_mask(tile.image)
        references = {"manual-proxy": tile.mask, "segnet": seg_mask}
        for agg in AGGREGATORS:
            explanation = explain_tile(clf, tile.image, config.xai_config(agg))
            save_gray_png(heat_dir / f"{tile.tile_id}_{agg}.png",
                          to_uint8(explanation.normalized))
            record = {
                "tile_id": tile.tile_id,
                "aggregator": agg,
                "prediction": explanation.prediction,
                "annotated_fraction": tile.annotated_fraction,
                "scores": {},
            }
            for t in config.thresholds:
                mask = explanation.masks[float(t)]
                pop = int(mask.sum())
                for source in GT_SOURCES:
                    g = references[source]
                    hit = intersection_score(mask, g)
                    prec = precision_score(mask, g, t)
                    excluded = source == "manual-proxy" and not g.any()
                    rows.append({
                        "tile_id": tile.tile_id,
                        "slide_seed": bag.slide_seed,
                        "aggregator": agg,
                        "threshold": float(t),
                        "gt_source": source,
                        "hit": hit,
                        "precision": prec,
                        "popcount": pop,
                        "iou": None,  # never scored against annotations
                        "prediction": explanation.prediction,
                        "annotated_fraction": tile.annotated_fraction,
                        "excluded": excluded,
                    })
                    record["scores"][(source, float(t))] = {
                        "hit": hit, "precision": prec, "excluded": excluded}
            records.append(record)
    return rows, records


def score_test_tiles(config: ExperimentConfig, out: Path, manifest: dict,
                     clf: TileClassifier, seg: SegNet
                     ) -> Tuple[List[dict], List[dict]]:
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    entries = manifest["splits"]["test"]
    results = parallel_map(
        lambda entry: _score_slide(config, out, entry, clf, seg),
        entries, config.threads)
    rows = [row for slide_rows, _ in results for row in slide_rows]
    records = [rec for _, slide_recs in results for rec in slide_recs]
    return rows, records


# ---------------------------------------------------------------------------
# aggregation


def _score_table(config: ExperimentConfig, rows: Sequence[dict]) -> dict:
    """Mean hit and precision per source x aggregator x threshold.

    Manual-proxy means skip rows whose reference annotation is empty; the
    segmentation source includes every tile. Excluded counts are reported.
    """
    table: dict = {}
    for source in GT_SOURCES:
        table[source] = {}
        for agg in AGGREGATORS:
            table[source][agg] = {}
            for t in config.thresholds:
                sel = [r for r in rows
                       if r["gt_source"] == source and r["aggregator"] == agg
                       and r["threshold"] == float(t)]
                kept = [r for r in sel if not r["excluded"]]
                cell = {
                    "count": len(kept),
                    "excluded": len(sel) - len(kept),
                    "mean_hit": (float(np.mean([r["hit"] for r in kept]))
                                 if kept else None),
                    "mean_precision": (float(np.mean([r["precision"] for r in kept]))
                                       if kept else None),
                }
                table[source][agg][f"{t:g}"] = cell
    return table


def _trend_table(config: ExperimentConfig, score_table: dict) -> dict:
    """Ratio of mean precision at the highest vs lowest threshold."""
    lo = min(config.thresholds)
    hi = max(config.thresholds)
    out: dict = {}
    for source in GT_SOURCES:
        out[source] = {}
        for agg in AGGREGATORS:
            cell_lo = score_table[source][agg][f"{lo:g}"]["mean_precision"]
            cell_hi = score_table[source][agg][f"{hi:g}"]["mean_precision"]
            ratio = None
            if cell_lo is not None and cell_hi is not None and cell_lo > 0:
                ratio = cell_hi / cell_lo
            out[source][agg] = {
                "threshold_lo": lo, "threshold_hi": hi,
                "precision_hi_over_lo": ratio,
            }
    return out


def faithfulness_report(config: ExperimentConfig, records: Sequence[dict],
                        seed: int) -> dict:
    """Rank correlations between predictions/annotations and scores.

    For every source x aggregator x threshold: Spearman rho of the tile
    prediction against P_t and against the hit indicator, rho of the
    annotated fraction against P_t, and a shuffled-prediction control that
    should sit near zero. Degenerate (constant) series yield null entries.
    """
    report: dict = {"n_records": len(records)}
    if len(records) < 30:
        report["flagged"] = "fewer than 30 scored tiles; correlations omitted"
        return report
    rng = np.random.default_rng([seed, 303])
    for source in GT_SOURCES:
        report.setdefault(source, {})
        for agg in AGGREGATORS:
            report[source][agg] = {}
            recs = [r for r in records if r["aggregator"] == agg]
            for t in config.thresholds:
                key = (source, float(t))
                kept = [r for r in recs if not r["scores"][key]["excluded"]]
                preds = [r["prediction"] for r in kept]
                fracs = [r["annotated_fraction"] for r in kept]
                precisions = [r["scores"][key]["precision"] for r in kept]
                hits = [r["scores"][key]["hit"] for r in kept]
                cell: Dict[str, Optional[float]] = {"count": len(kept)}
                if len(kept) >= 3:
                    shuffled = rng.permutation(preds)
                    cell["rho_prediction_precision"] = spearman_rho(preds, precisions)
                    cell["rho_prediction_hit"] = spearman_rho(preds, hits)
                    cell["rho_annotated_precision"] = spearman_rho(fracs, precisions)
                    cell["rho_shuffled_precision"] = spearman_rho(shuffled, precisions)
                else:
                    cell["flagged"] = "too few included tiles"
                report[source][agg][f"{t:g}"] = cell
    return report


# ---------------------------------------------------------------------------
# entry point


def run_pipeline(config: ExperimentConfig) -> dict:
    """Run the full experiment; returns the summary payload it wrote."""
    out = _require_out_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(config, out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    warnings: List[str] = []

    manifest = ensure_dataset(config, out)
    train_bags, train_labels = _load_split_bags(config, out, manifest, "train")
    val_bags, val_labels = _load_split_bags(config, out, manifest, "val")

    seg = ensure_segnet(config, out, train_bags)
    clf, auc = ensure_mil(config, out, train_bags, train_labels,
                          val_bags, val_labels)
    if auc is None:
        warnings.append("validation slide AUC undefined (missing class or empty bag)")

    if not manifest["splits"]["test"]:
        warnings.append("test split is empty; nothing to score")
        rows: List[dict] = []
        records: List[dict] = []
    else:
        rows, records = score_test_tiles(config, out, manifest, clf, seg)

    score_table = _score_table(config, rows)
    summary = {
        "schema": "summary-v1",
        "dataset": {
            "slides": {s: len(manifest["splits"][s]) for s in SPLIT_NAMES},
            "test_tiles": len({r["tile_id"] for r in rows}),
        },
        "mil": {
            "val_slide_auc": auc,
            "pretrain_epochs": config.mil_pretrain_epochs,
            "epochs": config.mil_epochs,
        },
        "seg": {"epochs": config.seg_epochs, "base_width": config.seg_base_width},
        "scores": score_table,
        "trend": _trend_table(config, score_table),
        "faithfulness": faithfulness_report(config, records, config.seed),
        "warnings": warnings,
    }
    write_csv(out / "scores.csv", SCORES_SCHEMA, SCORES_COLUMNS, rows)
    _merge_summary(out / "summary.json", summary)
    return summary


def _merge_summary(path: Path, payload: dict) -> None:
    """Write summary keys, preserving sections other runs contributed."""
    existing: dict = {}
    if path.exists():
        try:
            existing = json.loads(path.read_text())
        except json.JSONDecodeError:
            existing = {}
    existing.update(payload)
    write_json(path, existing)

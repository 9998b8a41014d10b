"""Agreement metrics between binary relevance masks and reference masks,
rank statistics, and the analytic baseline for structureless attribution.

Precision uses the nominal mask size (1 - t) * n as its denominator rather
than the realized popcount, so values are comparable across tiles and can
exceed 1 slightly when ties inflate the mask. IoU is undefined for two empty
masks and reported as None in that case.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .xai import percentile_normalize, threshold_map


class MetricError(ValueError):
    """Invalid metric input (shape mismatch, empty series, bad threshold)."""


def _as_bool(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype != bool:
        arr = arr.astype(bool)
    if arr.size == 0:
        raise MetricError(f"{name}: empty mask")
    return arr


def _pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a = _as_bool(a, "mask")
    b = _as_bool(b, "reference")
    if a.shape != b.shape:
        raise MetricError(f"mask shape {a.shape} != reference shape {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# per-tile agreement scores


def intersection_hit(mask, reference) -> bool:
    """True when the mask overlaps the reference anywhere."""
    a, b = _pair(mask, reference)
    return bool(np.any(a & b))


def intersection_score(mask, reference) -> int:
    """`intersection_hit` as a 0/1 term; dataset means average these."""
    return int(intersection_hit(mask, reference))


def precision_score(mask, reference, t: float) -> float:
    """Overlap count divided by the nominal mask size (1 - t) * n."""
    a, b = _pair(mask, reference)
    t = float(t)
    if not 0.0 <= t < 1.0:
        raise MetricError(f"threshold {t} outside [0, 1)")
    nominal = (1.0 - t) * a.size
    return float(np.sum(a & b)) / nominal


def iou_score(mask, reference) -> Optional[float]:
    """Intersection over union; None when both masks are empty."""
    a, b = _pair(mask, reference)
    union = np.sum(a | b)
    if union == 0:
        return None
    return float(np.sum(a & b)) / float(union)


# ---------------------------------------------------------------------------
# rank statistics


def rank_average(values) -> np.ndarray:
    """1-based ranks with ties assigned their average rank."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise MetricError("cannot rank an empty series")
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(arr.size, dtype=np.float64)
    i = 0
    while i < arr.size:
        j = i
        while j < arr.size and arr[order[j]] == arr[order[i]]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def spearman_rho(xs, ys) -> Optional[float]:
    """Rank correlation with average-rank ties; None when undefined."""
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if xs.size != ys.size:
        raise MetricError(f"series lengths differ: {xs.size} vs {ys.size}")
    if xs.size < 2:
        return None
    rx = rank_average(xs)
    ry = rank_average(ys)
    sx = rx.std()
    sy = ry.std()
    if sx == 0.0 or sy == 0.0:
        return None
    cov = float(np.mean((rx - rx.mean()) * (ry - ry.mean())))
    return cov / (sx * sy)


def mann_whitney_auc(positives, negatives) -> float:
    """Probability a positive outranks a negative, ties counting half."""
    pos = np.asarray(positives, dtype=np.float64).reshape(-1)
    neg = np.asarray(negatives, dtype=np.float64).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise MetricError("both groups must be non-empty")
    combined = np.concatenate((pos, neg))
    ranks = rank_average(combined)
    u = float(ranks[: pos.size].sum()) - pos.size * (pos.size + 1) / 2.0
    return u / (pos.size * neg.size)


# ---------------------------------------------------------------------------
# binned summaries


@dataclass(frozen=True)
class BinSummary:
    lo: float
    hi: float
    count: int
    mean: Optional[float]
    std: Optional[float]  # sample std, needs at least two values


def binned_summary(xs, ys, edges: Sequence[float]) -> List[BinSummary]:
    """Mean and std of `ys` grouped by which bin of `edges` each x falls in.

    Bins are half-open [lo, hi), except the last which includes its upper
    edge. Values outside the edges are dropped. Empty bins report mean None.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if xs.size != ys.size:
        raise MetricError(f"series lengths differ: {xs.size} vs {ys.size}")
    edges = [float(e) for e in edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise MetricError("edges must be strictly increasing with at least two values")
    out: List[BinSummary] = []
    for k, (lo, hi) in enumerate(zip(edges, edges[1:])):
        last = k == len(edges) - 2
        sel = (xs >= lo) & ((xs <= hi) if last else (xs < hi))
        n = int(np.sum(sel))
        out.append(BinSummary(
            lo=lo, hi=hi, count=n,
            mean=float(ys[sel].mean()) if n else None,
            std=float(ys[sel].std(ddof=1)) if n >= 2 else None,
        ))
    return out


# ---------------------------------------------------------------------------
# structureless-attribution baseline


@dataclass(frozen=True)
class BaselineValues:
    iou: float
    precision: float


def uniform_baseline(t: float) -> BaselineValues:
    """Expected agreement between two independent top-(1-t) random masks.

    Two masks that each keep a uniformly random fraction (1-t) of entries
    intersect in expectation on (1-t)^2 of them, giving
    IoU = (1-t) / (1+t) and precision = 1 - t.
    """
    t = float(t)
    if not 0.0 <= t < 1.0:
        raise MetricError(f"threshold {t} outside [0, 1)")
    return BaselineValues(iou=(1.0 - t) / (1.0 + t), precision=1.0 - t)


@dataclass(frozen=True)
class McBaseline:
    iou_mean: float
    iou_stderr: float
    precision_mean: float
    precision_stderr: float
    trials: int


def uniform_baseline_mc(t: float, size: int = 128, trials: int = 800,
                        seed: int = 20240) -> McBaseline:
    """Monte Carlo version of `uniform_baseline` through the real pipeline.

    Each trial draws two independent uniform-noise maps, runs both through
    percentile normalization and thresholding, and scores one against the
    other. Standard errors use the sample standard deviation.
    """
    t = float(t)
    if not 0.0 <= t < 1.0:
        raise MetricError(f"threshold {t} outside [0, 1)")
    if trials < 2:
        raise MetricError("at least two trials are needed for a standard error")
    rng = np.random.default_rng(seed)
    ious = np.empty(trials)
    precisions = np.empty(trials)
    for k in range(trials):
        a = threshold_map(percentile_normalize(rng.random((size, size))), t)
        b = threshold_map(percentile_normalize(rng.random((size, size))), t)
        iou = iou_score(a, b)
        ious[k] = 0.0 if iou is None else iou
        precisions[k] = precision_score(a, b, t)
    root_n = np.sqrt(trials)
    return McBaseline(
        iou_mean=float(ious.mean()),
        iou_stderr=float(ious.std(ddof=1) / root_n),
        precision_mean=float(precisions.mean()),
        precision_stderr=float(precisions.std(ddof=1) / root_n),
        trials=trials,
    )

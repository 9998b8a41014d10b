"""Attribution maps for tile classifiers.

The raw signal is activation times gradient, taken per channel at a set of
tapped convolution layers after one backward pass from the positive-class
probability. Channel maps are collapsed with a configurable aggregator,
upscaled to tile resolution, summed across layers, converted to percentile
ranks, and finally thresholded into binary relevance masks.

All functions operate on plain float64 numpy arrays; the classifier only has
to expose `attribution_pass(tile) -> (prediction, {layer: (act, grad)})`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

AGGREGATORS = ("mean", "abs", "var")
UPSCALE_MODES = ("nearest", "bilinear")

ATTRIBUTION_TARGET = "softmax-prob"  # gradients are taken from this scalar


class XaiError(ValueError):
    """Invalid attribution configuration or malformed input map."""


@dataclass(frozen=True)
class XaiConfig:
    """Settings that fully determine an attribution map."""

    layers: Tuple[int, ...] = (2, 4, 6, 8)
    aggregator: str = "abs"
    upscale: str = "nearest"
    thresholds: Tuple[float, ...] = (0.5, 0.8, 0.9, 0.95)
    per_layer_rescale: bool = False

    def __post_init__(self):
        if not self.layers:
            raise XaiError("at least one tapped layer is required")
        if len(set(self.layers)) != len(self.layers):
            raise XaiError("duplicate layer indices")
        if self.aggregator not in AGGREGATORS:
            raise XaiError(f"unknown aggregator '{self.aggregator}', choose from {AGGREGATORS}")
        if self.upscale not in UPSCALE_MODES:
            raise XaiError(f"unknown upscale mode '{self.upscale}', choose from {UPSCALE_MODES}")
        for t in self.thresholds:
            if not 0.0 <= t < 1.0:
                raise XaiError(f"threshold {t} outside [0, 1)")

    def digest(self) -> str:
        """Stable hash identifying the attribution settings, for result files."""
        payload = {
            "target": ATTRIBUTION_TARGET,
            "layers": list(self.layers),
            "aggregator": self.aggregator,
            "upscale": self.upscale,
            "thresholds": list(self.thresholds),
            "per_layer_rescale": self.per_layer_rescale,
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Explanation:
    """Attribution products for one tile under one configuration."""

    prediction: float
    raw: np.ndarray
    normalized: np.ndarray
    masks: Dict[float, np.ndarray] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# channel aggregation and layer fusion


def channel_attribution(activation: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Per-channel attribution: elementwise activation times gradient."""
    act = np.asarray(activation, dtype=np.float64)
    grad = np.asarray(gradient, dtype=np.float64)
    if act.shape != grad.shape:
        raise XaiError(f"activation shape {act.shape} != gradient shape {grad.shape}")
    if act.ndim != 3:
        raise XaiError(f"expected HxWxC maps, got shape {act.shape}")
    return act * grad


def layer_attribution(classifier, tile: np.ndarray, layer: int) -> np.ndarray:
    """Activation-times-gradient block of one tapped layer for one tile."""
    _, taps = classifier.attribution_pass(tile)
    if layer not in taps:
        raise XaiError(f"layer {layer} has no tap (available: {sorted(taps)})")
    act, grad = taps[layer]
    return channel_attribution(act, grad)


def aggregate_channels(attr: np.ndarray, aggregator: str) -> np.ndarray:
    """Collapse an HxWxC attribution block to one HxW map."""
    attr = np.asarray(attr, dtype=np.float64)
    if attr.ndim != 3:
        raise XaiError(f"expected HxWxC attribution, got shape {attr.shape}")
    if aggregator == "mean":
        return attr.mean(axis=2)
    if aggregator == "abs":
        return np.abs(attr).mean(axis=2)
    if aggregator == "var":
        return attr.var(axis=2)
    raise XaiError(f"unknown aggregator '{aggregator}'")


def _resize_map(arr: np.ndarray, size: int, mode: str) -> np.ndarray:
    """Resize a 2-d map; nearest index replication or bilinear interpolation."""
    h, w = arr.shape
    if mode == "nearest":
        si = (np.arange(size) * h) // size
        sj = (np.arange(size) * w) // size
        return arr[si[:, None], sj[None, :]]
    if mode == "bilinear":
        def grid(n_in):
            src = (np.arange(size) + 0.5) * (n_in / size) - 0.5
            src = np.clip(src, 0.0, n_in - 1.0)
            lo = np.floor(src).astype(int)
            return lo, np.minimum(lo + 1, n_in - 1), src - lo

        i0, i1, fi = grid(h)
        j0, j1, fj = grid(w)
        top = arr[i0][:, j0] * (1 - fj)[None, :] + arr[i0][:, j1] * fj[None, :]
        bot = arr[i1][:, j0] * (1 - fj)[None, :] + arr[i1][:, j1] * fj[None, :]
        return top * (1 - fi)[:, None] + bot * fi[:, None]
    raise XaiError(f"unknown upscale mode '{mode}'")


def fuse_layers(per_layer: Mapping[int, np.ndarray], size: int,
                mode: str = "nearest", per_layer_rescale: bool = False) -> np.ndarray:
    """Upscale each layer map to `size` x `size` and sum them."""
    if not per_layer:
        raise XaiError("no layer maps to fuse")
    fused = np.zeros((size, size))
    for layer in sorted(per_layer):
        m = np.asarray(per_layer[layer], dtype=np.float64)
        if m.ndim != 2:
            raise XaiError(f"layer {layer}: expected a 2-d map, got shape {m.shape}")
        if per_layer_rescale:
            peak = np.abs(m).max()
            if peak > 0.0:
                m = m / peak
        fused += _resize_map(m, size, mode)
    return fused


# ---------------------------------------------------------------------------
# percentile normalization and thresholding


def percentile_normalize(a: np.ndarray) -> np.ndarray:
    """Map each entry to the fraction of entries strictly below it.

    Output values lie in [0, 1); ties share a rank. For distinct inputs the
    result is a permutation of {0, 1/n, ..., (n-1)/n}.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise XaiError("cannot normalize an empty map")
    flat = a.reshape(-1)
    ranks = np.searchsorted(np.sort(flat), flat, side="left")
    return (ranks / flat.size).reshape(a.shape)


def threshold_map(normalized: np.ndarray, t: float) -> np.ndarray:
    """Binary mask keeping entries with percentile rank at least `t`."""
    t = float(t)
    if not 0.0 <= t < 1.0:
        raise XaiError(f"threshold {t} outside [0, 1)")
    normalized = np.asarray(normalized)
    return normalized >= t


def to_uint8(normalized: np.ndarray) -> np.ndarray:
    """8-bit render of a normalized map, for heatmap image export."""
    return np.round(np.asarray(normalized) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# end-to-end explanation of one tile


def explain_tile(classifier, tile: np.ndarray, config: XaiConfig,
                 thresholds: Optional[Sequence[float]] = None) -> Explanation:
    """Full attribution pipeline for one tile.

    `classifier.attribution_pass(tile)` must return the positive-class
    probability and, for every tapped layer, the activation and its gradient
    with respect to that probability.
    """
    prediction, taps = classifier.attribution_pass(tile)
    missing = [l for l in config.layers if l not in taps]
    if missing:
        raise XaiError(f"classifier provided no taps for layers {missing}")
    size = int(tile.shape[0])
    per_layer = {}
    for layer in config.layers:
        act, grad = taps[layer]
        per_layer[layer] = aggregate_channels(channel_attribution(act, grad),
                                              config.aggregator)
    raw = fuse_layers(per_layer, size, config.upscale, config.per_layer_rescale)
    normalized = percentile_normalize(raw)
    wanted = config.thresholds if thresholds is None else tuple(thresholds)
    masks = {float(t): threshold_map(normalized, t) for t in wanted}
    return Explanation(prediction=float(prediction), raw=raw,
                       normalized=normalized, masks=masks)

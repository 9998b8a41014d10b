"""Small encoder-decoder segmentation net with per-pixel 2-way softmax.

Channel 0 is the lesion class. The decoder upsamples (nearest) and
concatenates the matching encoder activation before each conv, so fine
boundaries survive the two pooling steps. Training minimises soft dice
loss, averaged over classes, with plain SGD at a fixed learning rate.
"""

from __future__ import annotations

from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from ..engine import (
    Tensor,
    add,
    add_const,
    backward,
    concat_channels,
    conv2d,
    div,
    load_tensors,
    mul,
    mul_const,
    neg,
    reduce_sum,
    relu,
    save_tensors,
    softmax,
    upsample,
    maxpool2x2,
)
from .classifier import NetError, _he, _sgd

LESION_CHANNEL = 0
N_CLASSES = 2


def mask_to_onehot(mask: np.ndarray) -> np.ndarray:
    """Boolean lesion mask -> HxWx2 one-hot target (channel 0 = lesion)."""
    mask = np.asarray(mask)
    if mask.dtype != np.bool_ or mask.ndim != 2:
        raise NetError("mask must be a 2-d boolean array")
    target = np.zeros(mask.shape + (N_CLASSES,))
    target[:, :, LESION_CHANNEL] = mask
    target[:, :, 1 - LESION_CHANNEL] = ~mask
    return target


def _check_onehot(target: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(target, dtype=np.float64)
    if arr.shape != shape:
        raise NetError(f"target shape {arr.shape} != {shape}")
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise NetError("target must be one-hot (0/1 entries)")
    # single-channel targets are plain binary masks; only multi-channel
    # targets must cover each pixel exactly once
    if shape[-1] >= 2 and not np.all(arr.sum(axis=-1) == 1.0):
        raise NetError("target must be one-hot (one class per pixel)")
    return arr


def dice_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over classes of 1 - 2*sum(p*g) / (sum(p^2) + sum(g^2)).

    A class absent from both prediction and target (0/0) contributes 0.
    The result lies in [0, 1] for predictions in [0, 1].
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 3:
        raise NetError("pred must be HxWxC")
    target = _check_onehot(target, pred.shape)
    if pred.min() < 0.0 or pred.max() > 1.0:
        raise NetError("pred values must lie in [0, 1]")
    total = 0.0
    for c in range(pred.shape[2]):
        p = pred[:, :, c]
        g = target[:, :, c]
        den = float((p * p).sum() + (g * g).sum())
        if den == 0.0:
            continue
        total += 1.0 - 2.0 * float((p * g).sum()) / den
    return total / pred.shape[2]


def dice_loss_graph(probs: Tensor, target: np.ndarray) -> Tensor:
    """Graph form of dice_loss for HxWxC softmax probabilities.

    Softmax outputs are strictly positive, so no class denominator can hit
    0/0 here; the plain function keeps that branch for hard inputs.
    """
    shape = probs.data.shape
    if len(shape) != 3:
        raise NetError("probs must be HxWxC")
    target = _check_onehot(target, shape)
    n_classes = shape[2]
    sq = mul(probs, probs)
    acc: Optional[Tensor] = None
    for c in range(n_classes):
        sel = np.zeros(shape)
        sel[:, :, c] = 1.0
        g = np.zeros(shape)
        g[:, :, c] = target[:, :, c]
        num = mul_const(reduce_sum(mul(probs, Tensor(g))), 2.0)
        den = add_const(reduce_sum(mul(sq, Tensor(sel))),
                        float(target[:, :, c].sum()))
        term = add_const(neg(div(num, den)), 1.0)
        acc = term if acc is None else add(acc, term)
    return mul_const(acc, 1.0 / n_classes)


class SegNet:
    """Two-scale U-shaped network: enc(w) -> enc(2w) -> mid(4w) -> dec -> 1x1."""

    def __init__(self, base_width: int = 8, seed: int = 0):
        if base_width < 1:
            raise NetError("base width must be positive")
        self.base_width = int(base_width)
        w = self.base_width
        rng = np.random.default_rng(seed)
        p: Dict[str, np.ndarray] = {}
        p["enc1.w"] = _he(rng, (3, 3, 3, w), 27)
        p["enc1.b"] = np.zeros(w)
        p["enc2.w"] = _he(rng, (3, 3, w, 2 * w), 9 * w)
        p["enc2.b"] = np.zeros(2 * w)
        p["mid.w"] = _he(rng, (3, 3, 2 * w, 4 * w), 18 * w)
        p["mid.b"] = np.zeros(4 * w)
        p["dec2.w"] = _he(rng, (3, 3, 6 * w, 2 * w), 54 * w)
        p["dec2.b"] = np.zeros(2 * w)
        p["dec1.w"] = _he(rng, (3, 3, 3 * w, w), 27 * w)
        p["dec1.b"] = np.zeros(w)
        # small output weights keep the initial probability map near-uniform
        p["out.w"] = rng.normal(0.0, 0.05, size=(1, 1, w, N_CLASSES))
        p["out.b"] = np.zeros(N_CLASSES)
        self.params = p

    def _wrap_params(self) -> Dict[str, Tensor]:
        return {name: Tensor(arr, name=name) for name, arr in self.params.items()}

    def _check_tile(self, tile: np.ndarray) -> np.ndarray:
        arr = np.asarray(tile, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise NetError("tile must be HxWx3")
        if arr.shape[0] % 4 != 0 or arr.shape[1] % 4 != 0 or min(arr.shape[:2]) < 4:
            raise NetError("tile height and width must be multiples of 4")
        return arr

    def prob_graph(self, tile: np.ndarray, pt: Mapping[str, Tensor]) -> Tensor:
        x = Tensor(self._check_tile(tile).copy(), name="tile")
        h = mul_const(x, 1.0 / 255.0)
        e1 = relu(conv2d(h, pt["enc1.w"], pt["enc1.b"], padding=1))
        d1 = maxpool2x2(e1)
        e2 = relu(conv2d(d1, pt["enc2.w"], pt["enc2.b"], padding=1))
        d2 = maxpool2x2(e2)
        m = relu(conv2d(d2, pt["mid.w"], pt["mid.b"], padding=1))
        u2 = upsample(m, e2.data.shape[:2], mode="nearest")
        c2 = relu(conv2d(concat_channels(u2, e2), pt["dec2.w"], pt["dec2.b"],
                         padding=1))
        u1 = upsample(c2, e1.data.shape[:2], mode="nearest")
        c1 = relu(conv2d(concat_channels(u1, e1), pt["dec1.w"], pt["dec1.b"],
                         padding=1))
        logits = conv2d(c1, pt["out.w"], pt["out.b"], padding=0)
        return softmax(logits)

    def predict(self, tile: np.ndarray) -> np.ndarray:
        """Per-pixel class probabilities, HxWx2."""
        return self.prob_graph(tile, self._wrap_params()).data.copy()

    def lesion_probability(self, tile: np.ndarray) -> np.ndarray:
        return self.predict(tile)[:, :, LESION_CHANNEL]

    def predicted_mask(self, tile: np.ndarray) -> np.ndarray:
        probs = self.predict(tile)
        return probs.argmax(axis=2) == LESION_CHANNEL

    # -- persistence ----------------------------------------------------------

    def save(self, path, extra: Optional[Mapping[str, np.ndarray]] = None) -> None:
        tensors = dict(self.params)
        tensors["meta.base_width"] = np.asarray(float(self.base_width))
        for name, arr in (extra or {}).items():
            tensors[f"extra.{name}"] = np.asarray(arr, dtype=np.float64)
        save_tensors(path, tensors)

    @classmethod
    def load(cls, path) -> Tuple["SegNet", Dict[str, np.ndarray]]:
        tensors = load_tensors(path)
        model = cls(base_width=int(tensors["meta.base_width"]))
        extra: Dict[str, np.ndarray] = {}
        for name, arr in tensors.items():
            if name.startswith("meta."):
                continue
            if name.startswith("extra."):
                extra[name[len("extra."):]] = arr
                continue
            if name not in model.params:
                raise NetError(f"checkpoint tensor {name!r} does not fit the model")
            if model.params[name].shape != arr.shape:
                raise NetError(f"checkpoint tensor {name!r} has shape {arr.shape}")
            model.params[name] = arr
        return model, extra


def seg_train_step(model: SegNet, tile: np.ndarray, mask: np.ndarray,
                   learning_rate: float) -> float:
    if not learning_rate > 0.0:
        raise NetError("learning rate must be positive")
    pt = model._wrap_params()
    probs = model.prob_graph(tile, pt)
    loss = dice_loss_graph(probs, mask_to_onehot(mask))
    backward(loss)
    _sgd(pt, sorted(model.params), learning_rate)
    return loss.item()


def seg_train_epoch(model: SegNet, tiles, masks, learning_rate: float) -> float:
    tiles = list(tiles)
    masks = list(masks)
    if len(tiles) != len(masks) or not tiles:
        raise NetError("tiles and masks must be non-empty and equal length")
    losses = [seg_train_step(model, tile, mask, learning_rate)
              for tile, mask in zip(tiles, masks)]
    return float(np.mean(losses))

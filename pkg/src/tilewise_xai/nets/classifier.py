"""Tile classifier and slide-level max-pooling model.

The classifier is a small conv backbone (3x3 convs, ReLU, four 2x2 pools)
with a two-layer fully connected head ending in a 2-way softmax; the
positive-class probability is the tile score s. Every convolution output
(pre-ReLU) carries a tap index so attribution passes can read activations
and their gradients; activation-times-gradient is identical whether the tap
sits before or after the ReLU, since the ReLU mask appears in exactly one
factor either way.

The slide model takes the max over tile scores; ties resolve to the lowest
tile index, and only the argmax tile receives gradient during training.
With a frozen backbone, training runs on cached backbone features, which is
arithmetically identical to the full graph because the backbone contributes
no trained nodes.
"""

from __future__ import annotations

from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..engine import (
    Tensor,
    add_const,
    affine,
    backward,
    conv2d,
    flatten,
    load_tensors,
    log,
    maxpool2x2,
    mul_const,
    neg,
    pick,
    relu,
    save_tensors,
    select_max,
    softmax,
)

DEFAULT_CONV_WIDTHS = (8, 8, 16, 16, 24, 24, 32, 32)
DEFAULT_POOL_AFTER = (2, 4, 6, 8)
DEFAULT_HEAD_WIDTHS = (64, 32)


class NetError(ValueError):
    """Bad architecture parameters, shapes, labels, or hyperparameters."""


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class TileClassifier:
    """Conv backbone + FC head mapping an LxLx3 tile to a lesion score."""

    def __init__(self, tile_size: int = 64,
                 conv_widths: Sequence[int] = DEFAULT_CONV_WIDTHS,
                 pool_after: Sequence[int] = DEFAULT_POOL_AFTER,
                 head_widths: Sequence[int] = DEFAULT_HEAD_WIDTHS,
                 seed: int = 0):
        conv_widths = tuple(int(w) for w in conv_widths)
        pool_after = tuple(int(p) for p in pool_after)
        head_widths = tuple(int(w) for w in head_widths)
        if not conv_widths or any(w < 1 for w in conv_widths):
            raise NetError("conv widths must be positive")
        if any(p < 1 or p > len(conv_widths) for p in pool_after):
            raise NetError("pool positions must reference conv layers")
        if len(set(pool_after)) != len(pool_after):
            raise NetError("duplicate pool positions")
        shrink = 2 ** len(pool_after)
        if tile_size < shrink or tile_size % shrink != 0:
            raise NetError(f"tile size {tile_size} incompatible with {len(pool_after)} pools")
        self.tile_size = int(tile_size)
        self.conv_widths = conv_widths
        self.pool_after = pool_after
        self.head_widths = head_widths
        self.frozen_backbone = False
        self.feature_dim = (tile_size // shrink) ** 2 * conv_widths[-1]
        self.params: Dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        c_in = 3
        for i, width in enumerate(conv_widths, start=1):
            self.params[f"conv{i}.w"] = _he(rng, (3, 3, c_in, width), 9 * c_in)
            self.params[f"conv{i}.b"] = np.zeros(width)
            c_in = width
        self._init_head(rng)

    def _init_head(self, rng: np.random.Generator) -> None:
        fan = self.feature_dim
        for k, width in enumerate(self.head_widths, start=1):
            self.params[f"fc{k}.w"] = _he(rng, (width, fan), fan)
            self.params[f"fc{k}.b"] = np.zeros(width)
            fan = width
        self.params["out.w"] = rng.normal(0.0, np.sqrt(1.0 / fan), size=(2, fan))
        self.params["out.b"] = np.zeros(2)

    # -- parameter bookkeeping ------------------------------------------------

    def backbone_names(self) -> List[str]:
        return [n for n in sorted(self.params) if n.startswith("conv")]

    def head_names(self) -> List[str]:
        return [n for n in sorted(self.params) if not n.startswith("conv")]

    def reinit_head(self, seed: int) -> None:
        self._init_head(np.random.default_rng(seed))

    def _wrap_params(self) -> Dict[str, Tensor]:
        return {name: Tensor(arr, name=name) for name, arr in self.params.items()}

    # -- graphs ---------------------------------------------------------------

    def _check_tile(self, tile: np.ndarray) -> np.ndarray:
        arr = np.asarray(tile, dtype=np.float64)
        want = (self.tile_size, self.tile_size, 3)
        if arr.shape != want:
            raise NetError(f"tile shape {arr.shape} != {want}")
        return arr

    def _backbone_graph(self, x: Tensor, pt: Mapping[str, Tensor],
                        taps: Optional[Dict[int, Tensor]] = None) -> Tensor:
        h = mul_const(x, 1.0 / 255.0)
        for i in range(1, len(self.conv_widths) + 1):
            pre = conv2d(h, pt[f"conv{i}.w"], pt[f"conv{i}.b"], stride=1, padding=1)
            if taps is not None:
                taps[i] = pre
            h = relu(pre)
            if i in self.pool_after:
                h = maxpool2x2(h)
        return flatten(h)

    def _head_graph(self, feat: Tensor, pt: Mapping[str, Tensor]) -> Tensor:
        h = feat
        for k in range(1, len(self.head_widths) + 1):
            h = relu(affine(h, pt[f"fc{k}.w"], pt[f"fc{k}.b"]))
        return softmax(affine(h, pt["out.w"], pt["out.b"]))

    def score_graph(self, tile: np.ndarray, pt: Mapping[str, Tensor],
                    taps: Optional[Dict[int, Tensor]] = None
                    ) -> Tuple[Tensor, Tensor]:
        """(tile leaf, positive-class probability node) for one tile."""
        x = Tensor(self._check_tile(tile).copy(), name="tile")
        probs = self._head_graph(self._backbone_graph(x, pt, taps), pt)
        return x, pick(probs, 1)

    # -- inference ------------------------------------------------------------

    def classify_tile(self, tile: np.ndarray) -> float:
        _, s = self.score_graph(tile, self._wrap_params())
        return s.item()

    def probabilities(self, tile: np.ndarray) -> np.ndarray:
        pt = self._wrap_params()
        x = Tensor(self._check_tile(tile).copy())
        probs = self._head_graph(self._backbone_graph(x, pt), pt)
        return probs.data.copy()

    def features(self, tile: np.ndarray) -> np.ndarray:
        """Flattened backbone output, the head's input vector."""
        pt = self._wrap_params()
        x = Tensor(self._check_tile(tile).copy())
        return self._backbone_graph(x, pt).data.copy()

    def attribution_pass(self, tile: np.ndarray
                         ) -> Tuple[float, Dict[int, Tuple[np.ndarray, np.ndarray]]]:
        """Score plus, per conv layer, (activation, gradient of s w.r.t. it)."""
        pt = self._wrap_params()
        taps: Dict[int, Tensor] = {}
        _, s = self.score_graph(tile, pt, taps)
        backward(s)
        return s.item(), {i: (node.data.copy(), node.gradient.copy())
                          for i, node in taps.items()}

    # -- persistence ----------------------------------------------------------

    def save(self, path, extra: Optional[Mapping[str, np.ndarray]] = None) -> None:
        tensors = dict(self.params)
        tensors["meta.tile_size"] = np.asarray(float(self.tile_size))
        tensors["meta.conv_widths"] = np.asarray(self.conv_widths, dtype=np.float64)
        tensors["meta.pool_after"] = np.asarray(self.pool_after, dtype=np.float64)
        tensors["meta.head_widths"] = np.asarray(self.head_widths, dtype=np.float64)
        for name, arr in (extra or {}).items():
            tensors[f"extra.{name}"] = np.asarray(arr, dtype=np.float64)
        save_tensors(path, tensors)

    @classmethod
    def load(cls, path) -> Tuple["TileClassifier", Dict[str, np.ndarray]]:
        tensors = load_tensors(path)
        model = cls(
            tile_size=int(tensors["meta.tile_size"]),
            conv_widths=[int(w) for w in tensors["meta.conv_widths"]],
            pool_after=[int(p) for p in tensors["meta.pool_after"]],
            head_widths=[int(w) for w in tensors["meta.head_widths"]],
        )
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


# ---------------------------------------------------------------------------
# slide-level model


class MilModel:
    def __init__(self, classifier: TileClassifier):
        self.classifier = classifier


def _bag_images(bag) -> List[np.ndarray]:
    if hasattr(bag, "tiles"):
        return [t.image for t in bag.tiles]
    return list(bag)


def mil_forward(model: MilModel, bag) -> Tuple[float, int, List[float]]:
    """Slide score = max tile score; ties resolve to the lowest index."""
    images = _bag_images(bag)
    if not images:
        raise NetError("empty bag")
    scores = [model.classifier.classify_tile(im) for im in images]
    best = int(np.argmax(scores))
    return scores[best], best, scores


def _sgd(pt: Mapping[str, Tensor], names, lr: float) -> None:
    for name in names:
        t = pt[name]
        if t.grad is not None:
            t.data -= lr * t.grad


def _bag_loss_graph(score_nodes: Sequence[Tensor], label: int) -> Tensor:
    smax = select_max(score_nodes)
    if label == 1:
        return neg(log(smax))
    return neg(log(add_const(neg(smax), 1.0)))


def mil_train_step(model: MilModel, bag, label: int, learning_rate: float) -> float:
    """One SGD step on the bag's cross-entropy; only the argmax tile and,
    with a frozen backbone, only head parameters receive gradient."""
    if label not in (0, 1):
        raise NetError(f"label must be 0 or 1, got {label!r}")
    if not learning_rate > 0.0:
        raise NetError("learning rate must be positive")
    clf = model.classifier
    images = _bag_images(bag)
    if not images:
        raise NetError("empty bag")
    pt = clf._wrap_params()
    if clf.frozen_backbone:
        # backbone features as constants: bit-identical to the full graph
        scores = [pick(clf._head_graph(Tensor(clf.features(im)), pt), 1)
                  for im in images]
        trained = clf.head_names()
    else:
        scores = [clf.score_graph(im, pt)[1] for im in images]
        trained = sorted(clf.params)
    loss = _bag_loss_graph(scores, label)
    backward(loss)
    _sgd(pt, trained, learning_rate)
    return loss.item()


def mil_train_epoch(model: MilModel, bags, labels, learning_rate: float) -> float:
    bags = list(bags)
    labels = list(labels)
    if len(bags) != len(labels) or not bags:
        raise NetError("bags and labels must be non-empty and equal length")
    losses = [mil_train_step(model, bag, label, learning_rate)
              for bag, label in zip(bags, labels)]
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# tile-level pretraining (auxiliary task for the frozen-backbone mode)


def pretrain_step(classifier: TileClassifier, tile: np.ndarray, label: int,
                  learning_rate: float) -> float:
    """Plain cross-entropy step on one tile's class label; trains everything."""
    if label not in (0, 1):
        raise NetError(f"label must be 0 or 1, got {label!r}")
    if not learning_rate > 0.0:
        raise NetError("learning rate must be positive")
    pt = classifier._wrap_params()
    x = Tensor(classifier._check_tile(tile).copy())
    probs = classifier._head_graph(classifier._backbone_graph(x, pt), pt)
    loss = neg(log(pick(probs, label)))
    backward(loss)
    _sgd(pt, sorted(classifier.params), learning_rate)
    return loss.item()


def pretrain_epoch(classifier: TileClassifier, tiles, labels,
                   learning_rate: float) -> float:
    tiles = list(tiles)
    labels = list(labels)
    if len(tiles) != len(labels) or not tiles:
        raise NetError("tiles and labels must be non-empty and equal length")
    losses = [pretrain_step(classifier, tile, label, learning_rate)
              for tile, label in zip(tiles, labels)]
    return float(np.mean(losses))

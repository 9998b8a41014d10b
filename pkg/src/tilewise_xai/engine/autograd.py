"""Dense float64 compute graph with reverse-mode differentiation.

Values are numpy arrays in row-major order; every operation allocates a new
graph node holding the result. `backward` fills `.grad` on every node
reachable from a scalar output, and `LayerTap` objects expose intermediate
activations and their gradients to the attribution pipeline.

Graphs are re-evaluable: after perturbing a leaf's data in place, `replay`
recomputes every downstream value, which is what the central finite
difference check relies on.

A graph is single-writer: build it, differentiate it and replay it from one
thread. Distinct graphs share no state and may be used concurrently.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "EngineError",
    "Tensor",
    "LayerTap",
    "add",
    "add_const",
    "affine",
    "backward",
    "concat_channels",
    "conv2d",
    "div",
    "finite_difference_check",
    "flatten",
    "log",
    "maxpool2x2",
    "mul",
    "mul_const",
    "neg",
    "pick",
    "reduce_sum",
    "relu",
    "replay",
    "reshape",
    "select_max",
    "softmax",
    "sub",
    "upsample",
]


class EngineError(ValueError):
    """Shape mismatch, invalid operand, or a non-finite value in the graph."""


def _as_f64(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    # ascontiguousarray would promote 0-d arrays to 1-d, so only copy when needed
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """One graph node: a value plus, after `backward`, its cached gradient.

    Leaves are built directly (`Tensor(values)`); interior nodes come from
    the operator functions in this module. `grad` is None until a backward
    pass reaches the node; `gradient` reads it as a dense array either way.
    """

    __slots__ = ("data", "grad", "op", "parents", "name", "_forward", "_backward")

    def __init__(self, values, name: Optional[str] = None):
        data = _as_f64(values)
        if data.size == 0:
            raise EngineError("empty tensors are rejected")
        if not np.isfinite(data).all():
            raise EngineError("non-finite values in tensor" + (f" '{name}'" if name else ""))
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self.parents: tuple = ()
        self.name = name
        self._forward: Optional[Callable] = None
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def gradient(self) -> np.ndarray:
        """Gradient as an array; exactly zero where backward never reached."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def item(self) -> float:
        if self.data.size != 1:
            raise EngineError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def _acc(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.data.shape})"


class LayerTap:
    """Captured activation of one tapped layer, with its post-backward gradient."""

    def __init__(self, layer_index: int, node: Tensor):
        self.layer_index = layer_index
        self.node = node

    @property
    def activation(self) -> np.ndarray:
        return self.node.data

    @property
    def activation_gradient(self) -> np.ndarray:
        return self.node.gradient


def _make(op: str, parents: Sequence[Tensor], forward_fn: Callable) -> Tensor:
    data = forward_fn(*(p.data for p in parents))
    out = Tensor.__new__(Tensor)
    out.data = _as_f64(data)
    if out.data.size == 0:
        raise EngineError(f"{op}: empty result")
    if not np.isfinite(out.data).all():
        raise EngineError(f"{op}: non-finite values in result")
    out.grad = None
    out.op = op
    out.parents = tuple(parents)
    out.name = None
    out._forward = forward_fn
    out._backward = None
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise EngineError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise and scalar operators


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = _make("add", (a, b), lambda x, y: x + y)

    def bwd():
        a._acc(out.grad)
        b._acc(out.grad)

    out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = _make("sub", (a, b), lambda x, y: x - y)

    def bwd():
        a._acc(out.grad)
        b._acc(-out.grad)

    out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = _make("mul", (a, b), lambda x, y: x * y)

    def bwd():
        a._acc(out.grad * b.data)
        b._acc(out.grad * a.data)

    out._backward = bwd
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)
    out = _make("div", (a, b), lambda x, y: x / y)

    def bwd():
        a._acc(out.grad / b.data)
        b._acc(-out.grad * a.data / (b.data * b.data))

    out._backward = bwd
    return out


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _make("add_const", (a,), lambda x: x + c)

    def bwd():
        a._acc(out.grad)

    out._backward = bwd
    return out


def mul_const(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _make("mul_const", (a,), lambda x: x * c)

    def bwd():
        a._acc(out.grad * c)

    out._backward = bwd
    return out


def neg(a: Tensor) -> Tensor:
    return mul_const(a, -1.0)


def log(a: Tensor) -> Tensor:
    # log of a non-positive value surfaces as the usual non-finite error state
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _make("log", (a,), np.log)

    def bwd():
        a._acc(out.grad / a.data)

    out._backward = bwd
    return out


def relu(a: Tensor) -> Tensor:
    out = _make("relu", (a,), lambda x: np.maximum(x, 0.0))

    def bwd():
        # subgradient at exactly 0 is 0
        a._acc(np.where(a.data > 0.0, out.grad, 0.0))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# structural operators


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = _make("reshape", (a,), lambda x: np.ascontiguousarray(x).reshape(shape))

    def bwd():
        a._acc(out.grad.reshape(a.data.shape))

    out._backward = bwd
    return out


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.data.size,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.data.shape[:-1] != b.data.shape[:-1]:
        raise EngineError(
            f"concat_channels: incompatible shapes {a.data.shape} vs {b.data.shape}"
        )
    ca = a.data.shape[-1]
    out = _make("concat_channels", (a, b), lambda x, y: np.concatenate((x, y), axis=-1))

    def bwd():
        a._acc(out.grad[..., :ca])
        b._acc(out.grad[..., ca:])

    out._backward = bwd
    return out


def reduce_sum(a: Tensor) -> Tensor:
    out = _make("reduce_sum", (a,), lambda x: np.asarray(np.sum(x)))

    def bwd():
        a._acc(np.broadcast_to(out.grad, a.data.shape))

    out._backward = bwd
    return out


def pick(a: Tensor, index) -> Tensor:
    """Scalar node holding one entry of `a` (flat or multi-index)."""
    if isinstance(index, tuple):
        flat = int(np.ravel_multi_index(index, a.data.shape))
    else:
        flat = int(index)
    if not 0 <= flat < a.data.size:
        raise EngineError(f"pick: index {index} out of range for shape {a.data.shape}")
    out = _make("pick", (a,), lambda x: np.asarray(x.reshape(-1)[flat]))

    def bwd():
        buf = np.zeros_like(a.data)
        buf.reshape(-1)[flat] = out.grad
        a._acc(buf)

    out._backward = bwd
    return out


def select_max(scores: Sequence[Tensor]) -> Tensor:
    """Max over scalar nodes; gradient routes to the lowest-index argmax only."""
    scores = tuple(scores)
    if not scores:
        raise EngineError("select_max: empty score set")
    for s in scores:
        if s.data.size != 1:
            raise EngineError("select_max: operands must be scalars")

    def fwd(*vals):
        flat = [float(v.reshape(())) for v in vals]
        return np.asarray(max(flat))

    out = _make("select_max", scores, fwd)

    def bwd():
        vals = [float(s.data.reshape(())) for s in scores]
        winner = int(np.argmax(vals))  # first occurrence wins ties
        scores[winner]._acc(np.broadcast_to(out.grad, scores[winner].data.shape))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# network operators


def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _conv_forward(x, w, b, stride, padding):
    h, wd, _ = x.shape
    k = w.shape[0]
    cout = w.shape[3]
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0))) if padding else x
    ho = _conv_out_extent(h, k, stride, padding)
    wo = _conv_out_extent(wd, k, stride, padding)
    out = np.zeros((ho, wo, cout))
    for ki in range(k):
        for kj in range(k):
            patch = xp[ki : ki + stride * (ho - 1) + 1 : stride,
                       kj : kj + stride * (wo - 1) + 1 : stride]
            out += patch @ w[ki, kj]
    if b is not None:
        out += b
    return out


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an HxWxC image with k x k x C_in x C_out kernels."""
    if x.data.ndim != 3:
        raise EngineError(f"conv2d: input must be HxWxC, got shape {x.data.shape}")
    if w.data.ndim != 4 or w.data.shape[0] != w.data.shape[1]:
        raise EngineError(f"conv2d: kernels must be k x k x C_in x C_out, got {w.data.shape}")
    if w.data.shape[2] != x.data.shape[2]:
        raise EngineError(
            f"conv2d: input has {x.data.shape[2]} channels, kernels expect {w.data.shape[2]}"
        )
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise EngineError("conv2d: stride must be >= 1")
    if padding < 0:
        raise EngineError("conv2d: padding must be >= 0")
    k = w.data.shape[0]
    if k > x.data.shape[0] + 2 * padding or k > x.data.shape[1] + 2 * padding:
        raise EngineError("conv2d: kernel larger than padded input")
    if b is not None and b.data.shape != (w.data.shape[3],):
        raise EngineError(f"conv2d: bias shape {b.data.shape} != ({w.data.shape[3]},)")

    parents = (x, w) if b is None else (x, w, b)

    def fwd(xd, wd, *rest):
        return _conv_forward(xd, wd, rest[0] if rest else None, stride, padding)

    out = _make("conv2d", parents, fwd)

    def bwd():
        g = out.grad
        h, wd_, _ = x.data.shape
        xp = (np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
              if padding else x.data)
        ho, wo = g.shape[0], g.shape[1]
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for ki in range(k):
            for kj in range(k):
                rows = slice(ki, ki + stride * (ho - 1) + 1, stride)
                cols = slice(kj, kj + stride * (wo - 1) + 1, stride)
                patch = xp[rows, cols]
                dw[ki, kj] = np.tensordot(patch, g, axes=([0, 1], [0, 1]))
                dxp[rows, cols] += g @ w.data[ki, kj].T
        dx = dxp[padding : padding + h, padding : padding + wd_] if padding else dxp
        x._acc(dx)
        w._acc(dw)
        if b is not None:
            b._acc(g.sum(axis=(0, 1)))

    out._backward = bwd
    return out


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route gradient to the first entry."""
    if x.data.ndim != 3:
        raise EngineError(f"maxpool2x2: input must be HxWxC, got shape {x.data.shape}")
    h, w, c = x.data.shape
    if h % 2 or w % 2 or h < 2 or w < 2:
        raise EngineError(f"maxpool2x2: spatial extents must be even, got {h}x{w}")

    def blocks(xd):
        return xd.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(
            h // 2, w // 2, 4, c)

    out = _make("maxpool2x2", (x,), lambda xd: blocks(xd).max(axis=2))

    def bwd():
        xb = blocks(x.data)
        idx = xb.argmax(axis=2)  # first max in row-major block order
        d = np.zeros_like(xb)
        np.put_along_axis(d, idx[:, :, None, :], out.grad[:, :, None, :], axis=2)
        dx = d.reshape(h // 2, w // 2, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)
        x._acc(dx)

    out._backward = bwd
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully connected map w @ x + b for a flat input vector."""
    if x.data.ndim != 1:
        raise EngineError(f"affine: input must be a vector, got shape {x.data.shape}")
    if w.data.ndim != 2 or w.data.shape[1] != x.data.shape[0]:
        raise EngineError(f"affine: weight shape {w.data.shape} does not match input {x.data.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise EngineError(f"affine: bias shape {b.data.shape} != ({w.data.shape[0]},)")
    out = _make("affine", (x, w, b), lambda xd, wd, bd: wd @ xd + bd)

    def bwd():
        g = out.grad
        x._acc(w.data.T @ g)
        w._acc(np.outer(g, x.data))
        b._acc(g)

    out._backward = bwd
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis; each output vector sums to 1."""

    def fwd(xd):
        shifted = xd - xd.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    out = _make("softmax", (x,), fwd)

    def bwd():
        s = out.data
        g = out.grad
        x._acc(s * (g - np.sum(g * s, axis=-1, keepdims=True)))

    out._backward = bwd
    return out


def _nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def upsample(x: Tensor, size, mode: str = "nearest") -> Tensor:
    """Spatial resize of an HxWxC tensor; nearest replication by default."""
    if x.data.ndim != 3:
        raise EngineError(f"upsample: input must be HxWxC, got shape {x.data.shape}")
    if isinstance(size, int):
        size = (size, size)
    ho, wo = int(size[0]), int(size[1])
    if ho < 1 or wo < 1:
        raise EngineError("upsample: target extents must be positive")
    h, w, _ = x.data.shape

    if mode == "nearest":
        si = _nearest_indices(h, ho)
        sj = _nearest_indices(w, wo)

        out = _make("upsample_nearest", (x,), lambda xd: xd[si[:, None], sj[None, :]])

        def bwd():
            dx = np.zeros_like(x.data)
            np.add.at(dx, (si[:, None], sj[None, :]), out.grad)
            x._acc(dx)

        out._backward = bwd
        return out

    if mode == "bilinear":
        # half-pixel-centre convention, clamped at the borders
        def grid(n_in, n_out):
            src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
            src = np.clip(src, 0.0, n_in - 1.0)
            lo = np.floor(src).astype(int)
            hi = np.minimum(lo + 1, n_in - 1)
            frac = src - lo
            return lo, hi, frac

        i0, i1, fi = grid(h, ho)
        j0, j1, fj = grid(w, wo)
        wi = fi[:, None, None]
        wj = fj[None, :, None]
        corners = (
            (i0, j0, (1 - wi) * (1 - wj)),
            (i0, j1, (1 - wi) * wj),
            (i1, j0, wi * (1 - wj)),
            (i1, j1, wi * wj),
        )

        def fwd(xd):
            acc = np.zeros((ho, wo, xd.shape[2]))
            for ii, jj, ww in corners:
                acc += ww * xd[ii[:, None], jj[None, :]]
            return acc

        out = _make("upsample_bilinear", (x,), fwd)

        def bwd():
            dx = np.zeros_like(x.data)
            for ii, jj, ww in corners:
                np.add.at(dx, (ii[:, None], jj[None, :]), ww * out.grad)
            x._acc(dx)

        out._backward = bwd
        return out

    raise EngineError(f"upsample: unknown mode '{mode}'")


# ---------------------------------------------------------------------------
# graph traversal, backward, replay, finite differences


def _topo(out: Tensor) -> list:
    """Parents-before-children ordering of the graph below `out`."""
    order: list = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor) -> None:
    """Populate gradients of every node reachable from a scalar output."""
    if out.data.size != 1:
        raise EngineError("backward requires a scalar output")
    order = _topo(out)
    for node in order:
        node.grad = None
    out.grad = np.ones_like(out.data)
    for node in reversed(order):
        # grad None means no consumer contributed: the node's gradient is
        # exactly zero (e.g. a select_max loser), so nothing to propagate
        if node.grad is not None and node._backward is not None:
            node._backward()


def replay(out: Tensor) -> None:
    """Recompute every non-leaf value below `out` from current leaf data."""
    for node in _topo(out):
        if node._forward is not None:
            node.data = _as_f64(node._forward(*(p.data for p in node.parents)))


def finite_difference_check(out: Tensor, leaf: Tensor, step: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    Perturbs each entry of `leaf` by +-step, replays the graph, and compares
    (f(x+h) - f(x-h)) / 2h against the analytic gradient with the relative
    error |analytic - fd| / (|analytic| + 1e-12). Entries sitting exactly at
    0 are skipped (ReLU kink convention).
    """
    step = float(step)
    if step <= 0.0:
        raise EngineError("finite_difference_check: step must be positive")
    if out.data.size != 1:
        raise EngineError("finite_difference_check: output must be scalar")
    order = _topo(out)
    if not any(node is leaf for node in order):
        raise EngineError("finite_difference_check: leaf is not part of the graph")

    backward(out)
    analytic = leaf.gradient.copy()
    flat = leaf.data.reshape(-1)
    max_rel = 0.0
    for i in range(flat.size):
        x0 = flat[i]
        if x0 == 0.0:
            continue
        flat[i] = x0 + step
        replay(out)
        f_plus = float(out.data.reshape(()))
        flat[i] = x0 - step
        replay(out)
        f_minus = float(out.data.reshape(()))
        flat[i] = x0
        fd = (f_plus - f_minus) / (2.0 * step)
        rel = abs(analytic.reshape(-1)[i] - fd) / (abs(analytic.reshape(-1)[i]) + 1e-12)
        max_rel = max(max_rel, rel)
    replay(out)
    return max_rel

"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the network is a :class:`Tensor` wrapping a
row-major numpy array. Operations record a node (op name, parent tensors,
backward closure) on their output; ``backward`` on a scalar loss walks the
recorded graph once in reverse topological order and accumulates gradients
into every reachable tensor that has ``requires_grad`` set.

Graphs are per-step: nothing global is retained, so dropping the loss tensor
frees the whole graph. Higher-order derivatives are not supported.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class ShapeMismatchError(ValueError):
    """Operands cannot be combined under the supported shapes."""


class GraphError(RuntimeError):
    """Backward called on an invalid target (e.g. a non-scalar loss)."""


@dataclass
class Node:
    """Producing operation of a tensor: parents plus the backward rule.

    ``backward`` maps the upstream gradient (array, output-shaped) to one
    gradient array per parent, or None for a parent that takes no gradient.
    """

    op: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class Tensor:
    """A float64 array plus optional gradient and graph back-reference."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, node: Optional[Node] = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul_elem(self, other)

    def __rmul__(self, other):
        return mul_elem(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    requires = any(p.requires_grad for p in parents)
    node = Node(op, parents, backward_fn) if requires else None
    return Tensor(data, requires_grad=requires, node=node)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic (with broadcasting)
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), back)


def mul_elem(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "mul_elem")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul_elem", (a, b), back)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "div")

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, "div", (a, b), back)


def scalar_mul(a: Tensor, s: Scalar) -> Tensor:
    a = _wrap(a)
    s = float(s)

    def back(g):
        return (g * s,)

    return _make(a.data * s, "scalar_mul", (a,), back)


def sqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)

    def back(g):
        return (g * 0.5 / out,)

    return _make(out, "sqrt", (a,), back)


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0.0  # subgradient at 0 is 0

    def back(g):
        return (g * mask,)

    return _make(a.data * mask, "relu", (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (a,), back)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), "reshape", (a,), back)


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    widths = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def back(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 "concat", tensors, back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-D tensor."""
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"slice_cols: expected 2-D tensor, got {a.shape}")

    def back(g):
        out = np.zeros(a.shape)
        out[:, start:stop] = g
        return (out,)

    return _make(a.data[:, start:stop].copy(), "slice_cols", (a,), back)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (indices may repeat)."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.intp)

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx].copy(), "take_rows", (a,), back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = axis
    if axes is not None and not isinstance(axes, tuple):
        axes = (axes,)

    def back(g):
        if axes is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gk = g
        if not keepdims:
            gk = np.expand_dims(g, axes)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scalar_mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra / conv
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}"
        )

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, "matmul", (a, b), back)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """3x3 cross-correlation over NCHW maps.

    Output side is (H + 2*padding - 3)/stride + 1 and must be integral.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d: need 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise ShapeMismatchError(f"conv2d: kernel must be 3x3, got {kh}x{kw}")
    if kcin != cin:
        raise ShapeMismatchError(
            f"conv2d: input has {cin} channels but kernel expects {kcin}"
        )
    if (h + 2 * padding - 3) % stride != 0 or (w + 2 * padding - 3) % stride != 0:
        raise ShapeMismatchError(
            f"conv2d: non-integral output size for input {h}x{w}, "
            f"padding {padding}, stride {stride}"
        )
    ho = (h + 2 * padding - 3) // stride + 1
    wo = (w + 2 * padding - 3) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                      # [N,C,Ho,Wo,3,3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * 9)
    wmat = kernel.data.reshape(cout, cin * 9)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gk = (g2.T @ cols).reshape(cout, cin, 3, 3)
        dcols = (g2 @ wmat).reshape(n, ho, wo, cin, 3, 3).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j]
        if padding:
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        else:
            gx = gxp
        return gx, gk

    return _make(np.ascontiguousarray(out), "conv2d", (x, kernel), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of an NCHW map, yielding [N, C]."""
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool: need NCHW input, got {x.shape}")
    n, c, h, w = x.shape

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), "global_avg_pool", (x,), back)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2; spatial dims must be even."""
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"avg_pool2: need NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / 4.0,
                             (n, c, h // 2, 2, w // 2, 2))
        return (gx.reshape(n, c, h, w).copy(),)

    return _make(out, "avg_pool2", (x,), back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of an NCHW map by an integer factor."""
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"upsample_nearest: need NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    f = int(factor)
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def back(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make(out, "upsample_nearest", (x,), back)


# ---------------------------------------------------------------------------
# classification losses (fused for a clean, stable backward)
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels against [N, K] logits."""
    logits = _wrap(logits)
    if logits.data.ndim != 2:
        raise ShapeMismatchError(f"softmax_cross_entropy: need [N,K] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatchError(
            f"softmax_cross_entropy: {n} rows but {labels.shape} labels"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0,{k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    losses = lse - z[np.arange(n), labels]
    probs = np.exp(z - lse[:, None])

    def back(g):
        gm = probs.copy()
        gm[np.arange(n), labels] -= 1.0
        return (gm * (float(g) / n),)

    return _make(losses.mean(), "softmax_cross_entropy", (logits,), back)


# ---------------------------------------------------------------------------
# gradient-manipulating pseudo-ops
# ---------------------------------------------------------------------------

def grad_reverse(x: Tensor, lambda_grl: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -lambda_grl."""
    x = _wrap(x)
    lam = float(lambda_grl)

    def back(g):
        return (-lam * g,)

    return _make(x.data, "grad_reverse", (x,), back)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; severs the graph so no gradient reaches x or its ancestors."""
    x = _wrap(x)
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            stack.append((p, False))
    return order  # parents precede consumers


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dt into t.grad for every reachable requires_grad tensor."""
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    order = _topo_order(loss)
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad = t.grad + g
        parent_grads = t.node.backward(g)
        for parent, pg in zip(t.node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            elif parent.node is None:
                # graph leaf: accumulate directly
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64, copy=True)
                else:
                    parent.grad = parent.grad + pg
            else:
                grads[id(parent)] = np.array(pg, dtype=np.float64, copy=True)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None

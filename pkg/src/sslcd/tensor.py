"""Dense float32 tensors with define-by-run reverse-mode autodiff.

Every differentiable op records its parents and a closure mapping the output
gradient to per-parent gradients. ``Tensor.backward`` walks the recorded tape
in reverse topological order and frees it afterwards.

Batched variants are accepted where it matters for speed: ``conv2d`` takes
``[C, H, W]`` or ``[N, C, H, W]`` and ``linear`` takes ``[D]`` or ``[N, D]``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NumericalError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors.

    Float32 is the default. Float64 exists for finite-difference gradient
    checks, where float32 rounding swamps entries with small gradients.
    """
    global DTYPE
    previous = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        # always copy so callers cannot alias our storage
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(out.data)):
            raise NumericalError(f"non-finite output produced by {op}")
        out.grad = None
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {list(self.shape)}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor with requires_grad=True")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.astype(DTYPE) if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericalError(f"non-finite gradient flowing out of {node.op}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self):
        return absolute(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return Tensor._from_op(x.data**exponent, (x,), backward, "pow")


def absolute(x: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(x.data),)

    return Tensor._from_op(np.abs(x.data), (x,), backward, "abs")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data.astype(np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    s = out.astype(DTYPE)

    def backward(g):
        return (g * s * (1.0 - s),)

    return Tensor._from_op(s, (x,), backward, "sigmoid")


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    if np.any(x.data <= 0):
        raise NumericalError("log of a non-positive value")
    return Tensor._from_op(np.log(x.data), (x,), backward, "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return Tensor._from_op(np.clip(x.data, lo, hi), (x,), backward, "clamp")


# ---------------------------------------------------------------- reductions


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis, dtype=np.float64)

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(DTYPE),)

    return Tensor._from_op(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.data.mean(axis=axis, dtype=np.float64)

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(DTYPE),)

    return Tensor._from_op(out, (x,), backward, "mean")


def norm2(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; subgradient 0 where the norm is 0."""
    n = np.sqrt(np.sum(x.data.astype(np.float64) ** 2, axis=axis))
    nk = np.expand_dims(n, axis)

    def backward(g):
        safe = np.where(nk > 0, nk, 1.0)
        scale = np.where(nk > 0, np.expand_dims(g, axis) / safe, 0.0)
        return ((x.data * scale).astype(DTYPE),)

    return Tensor._from_op(n, (x,), backward, "norm2")


def l2_norm_over_channels(x: Tensor) -> Tensor:
    """Per-pixel Euclidean norm across channels: ``[C, H, W] -> [H, W]``."""
    return norm2(x, axis=-3)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over the two trailing spatial axes."""
    return mean(x, axis=(-2, -1))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = (e / e.sum(axis=axis, keepdims=True)).astype(DTYPE)

    def backward(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - dot),)

    return Tensor._from_op(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return ((g - s * g.sum(axis=axis, keepdims=True)).astype(DTYPE),)

    return Tensor._from_op(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(x.data.reshape(shape), (x,), backward, "reshape")


def getitem(x: Tensor, index) -> Tensor:
    basic = all(isinstance(i, (slice, int)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(x.data[index], (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


# ---------------------------------------------------------------- layers


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``y = W x + b`` for ``x`` of shape ``[D]`` or ``[N, D]``."""
    if x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ValueError(
            f"linear: input dim {x.shape[-1]} vs weights {list(weights.shape)}, bias {list(bias.shape)}"
        )
    out = x.data @ weights.data.T + bias.data

    def backward(g):
        gx = g @ weights.data
        if x.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return gx, gw, gb

    return Tensor._from_op(out, (x, weights, bias), backward, "linear")


def _padded_nhwc(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))


def _correlate_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1 zero-padded cross-correlation, ``[N,C,H,W] x [O,C,k,k] -> [N,O,H,W]``.

    One GEMM per kernel tap on shifted NHWC views; avoids materialising a
    k*k-times larger im2col matrix (this is memory-bound on small machines).
    """
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = _padded_nhwc(x, k // 2)
    taps = np.ascontiguousarray(w.transpose(2, 3, 1, 0), dtype=DTYPE)  # [k, k, C, O]
    out = np.zeros((n * h * wd, o), dtype=DTYPE)
    tmp = np.empty_like(out)
    shifted = np.empty((n, h, wd, c), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            shifted[...] = xp[:, i : i + h, j : j + wd, :]
            np.matmul(shifted.reshape(-1, c), taps[i, j], out=tmp)
            out += tmp
    return out.reshape(n, h, wd, o).transpose(0, 3, 1, 2)


def _weight_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    n, c, h, wd = x.shape
    o = g.shape[1]
    xp = _padded_nhwc(x, k // 2)
    rows = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
    gw = np.empty((o, c, k, k), dtype=DTYPE)
    shifted = np.empty((n, h, wd, c), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            shifted[...] = xp[:, i : i + h, j : j + wd, :]
            gw[:, :, i, j] = (shifted.reshape(-1, c).T @ rows).T
    return gw


def conv2d(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Same-padded, stride-1 2-D convolution (cross-correlation, as in CNN libraries)."""
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3] or weights.shape[2] % 2 == 0:
        raise ValueError(f"conv2d: weights must be [O, C, k, k] with odd k, got {list(weights.shape)}")
    if x.ndim not in (3, 4):
        raise ValueError(f"conv2d: input must be [C,H,W] or [N,C,H,W], got {list(x.shape)}")
    if x.shape[-3] != weights.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[-3]} channels, weights expect {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ValueError(f"conv2d: bias shape {list(bias.shape)} vs {weights.shape[0]} filters")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    k = weights.shape[2]
    out = _correlate_same(xd, weights.data) + bias.data[None, :, None, None]

    def backward(g):
        gb = g if batched else g[None]
        flipped = weights.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = _correlate_same(gb, flipped)
        gw = _weight_grad(xd, gb, k)
        gbias = gb.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
        return (gx if batched else gx[0]), gw, gbias

    return Tensor._from_op(out if batched else out[0], (x, weights, bias), backward, "conv2d")

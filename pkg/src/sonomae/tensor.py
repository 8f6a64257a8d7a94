"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery for a small vision transformer: elementwise ops,
(batched) matmul, shape ops, gather/scatter, reductions, softmax, layer
norm, GELU and dropout. Forward values are plain numpy arrays; every op
that sees a grad-requiring input records a backward closure. Calling
:func:`backward` replays the recorded ops in reverse creation order
(a valid reverse-topological order), visiting each node exactly once, so
gradient accumulation order is fixed and runs are reproducible.

Compute is float32 by default; float64 flows through unchanged and is
used by :func:`grad_check`, the central finite-difference oracle.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .rng import Rng


class ShapeMismatch(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class NonScalarLoss(ValueError):
    pass


_ids = itertools.count()
_CHECKED = False


@contextmanager
def checked_mode():
    """Raise NonFiniteValue as soon as any op produces a NaN/Inf."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = True
    try:
        yield
    finally:
        _CHECKED = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, grad={self.requires_grad})"

    # operator sugar; scalars and arrays become constant tensors
    def __add__(self, other):
        return add(self, _const_like(other, self))

    def __radd__(self, other):
        return add(_const_like(other, self), self)

    def __sub__(self, other):
        return sub(self, _const_like(other, self))

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, _const_like(other, self))

    def __rmul__(self, other):
        return mul(_const_like(other, self), self)

    def __neg__(self):
        return mul(self, _const_like(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _const_like(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=ref.dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], bw, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = parents if out.requires_grad else ()
    out._backward = bw if out.requires_grad else None
    out._id = next(_ids)
    out.op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeMismatch(f"gradient shape {g.shape} vs data {t.data.shape}")
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    # contributions are never mutated in place, so sharing the array is safe
    t.grad = g if t.grad is None else t.grad + g


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def _broadcastable(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "add")

    def bw(g):
        _accum(a, _sum_to_shape(g, a.shape))
        _accum(b, _sum_to_shape(g, b.shape))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "sub")

    def bw(g):
        _accum(a, _sum_to_shape(g, a.shape))
        _accum(b, _sum_to_shape(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "mul")

    def bw(g):
        _accum(a, _sum_to_shape(g * b.data, a.shape))
        _accum(b, _sum_to_shape(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw, "mul")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(g):
        _accum(x, g * y)

    return _result(y, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, g / x.data)

    return _result(np.log(x.data), (x,), bw, "log")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    y = (x.data * cdf).astype(x.dtype)

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        _accum(x, (g * (cdf + x.data * pdf)).astype(x.dtype))

    return _result(y, (x,), bw, "gelu")


def dropout(x: Tensor, p: float, rng: Rng | None = None, train: bool = True) -> Tensor:
    """Inverted dropout. Identity when train=False or p=0."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout with p > 0 needs an Rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def bw(g):
        _accum(x, g * keep)

    return _result(x.data * keep, (x,), bw, "dropout")


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch("matmul needs rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims {a.shape} @ {b.shape}")

    def bw(g):
        _accum(a, _sum_to_shape(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _sum_to_shape(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with x (..., d_in), w (d_in, d_out), b (d_out,)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, np.transpose(g, inv))

    return _result(np.transpose(x.data, axes), (x,), bw, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return _result(x.data.reshape(shape), (x,), bw, "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(xs, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw, "concat")


def gather(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Select rows along one axis by an integer index array."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        _accum(x, gx)

    return _result(np.take(x.data, idx, axis=axis), (x,), bw, "gather")


def gather_batched(x: Tensor, idx) -> Tensor:
    """x (B, N, ...), idx (B, V) -> (B, V, ...): per-row token gather."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim < 2 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"gather_batched: x {x.shape}, idx {idx.shape}")
    batch = np.arange(x.shape[0])[:, None]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (batch, idx), g)
        _accum(x, gx)

    return _result(x.data[batch, idx], (x,), bw, "gather_batched")


def scatter_batched(base: Tensor, idx, values: Tensor) -> Tensor:
    """Copy of base with out[b, idx[b, j]] = values[b, j]. Indices must be
    unique per row (last-write semantics are never relied on)."""
    idx = np.asarray(idx, dtype=np.int64)
    if values.shape[:2] != idx.shape or base.shape[0] != idx.shape[0]:
        raise ShapeMismatch(f"scatter_batched: base {base.shape}, idx {idx.shape}, values {values.shape}")
    batch = np.arange(base.shape[0])[:, None]
    out = base.data.copy()
    out[batch, idx] = values.data

    def bw(g):
        _accum(values, g[batch, idx])
        gb = g.copy()
        gb[batch, idx] = 0
        _accum(base, gb)

    return _result(out, (base, values), bw, "scatter_batched")


# ---------------------------------------------------------------------------
# reductions and normalizations


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape).astype(x.dtype))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(ge, x.data.shape).astype(x.dtype))

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]

    def bw(g):
        if axis is None:
            _accum(x, (np.broadcast_to(g, x.data.shape) / count).astype(x.dtype))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(x, (np.broadcast_to(ge, x.data.shape) / count).astype(x.dtype))

    return _result(x.data.mean(axis=axis, keepdims=keepdims), (x,), bw, "mean")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, (y * (g - dot)).astype(x.dtype))

    return _result(y.astype(x.dtype), (x,), bw, "softmax")


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Standardize along one axis (no affine; scale/shift with mul/add)."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = ((x.data - mu) * inv).astype(x.dtype)

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        _accum(x, ((g - gm - y * gym) * inv).astype(x.dtype))

    return _result(y, (x,), bw, "layer_norm")


# ---------------------------------------------------------------------------
# reverse pass


@dataclass
class GradientTape:
    """Ordered op records reachable from a loss, oldest first."""

    nodes: list[Tensor]


def trace(loss: Tensor) -> GradientTape:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._id)
    return GradientTape(nodes)


def backward(loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray] | None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable tensor.

    With `params`, returns {name: grad array}, zeros for parameters the
    loss never touched.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")
    tape = trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if params is None:
        return None
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: tuple[int, ...] | None
    n_checked: int
    passed: bool


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-4,
    tol: float = 1e-4,
    indices: Sequence[int] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued f against central
    differences at float64. `indices` restricts the check to a subset of
    flat coordinates (all coordinates when None)."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    loss = f(xt)
    backward(loss)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    max_rel = 0.0
    worst = None
    n = 0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        a = float(analytic.reshape(-1)[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        n += 1
        if rel > max_rel:
            max_rel = rel
            worst = np.unravel_index(i, base.shape)
    return GradCheckReport(max_rel_err=max_rel, worst_index=worst, n_checked=n, passed=max_rel < tol)

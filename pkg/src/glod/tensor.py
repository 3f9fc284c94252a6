"""Dense tensors with taped reverse-mode autodiff.

Values are numpy arrays in float32 (training) or float64 (verification).
Differentiable ops record nodes onto the active :class:`Tape`; append order
is the topological order, and :func:`backward` walks it strictly in reverse.
Ops executed with no tape active (inference, finite differences) record
nothing and pay no graph overhead.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy import special as _special

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "no_grad",
    "backward",
    "set_debug_checks",
    "add", "sub", "mul", "div", "neg", "pow_scalar",
    "exp", "log", "sqrt", "erf", "clip", "tabs",
    "relu", "sigmoid", "gelu",
    "tsum", "tmean", "tmax",
    "reshape", "transpose", "concat", "narrow", "roll",
    "gather_rows", "gather_pixels", "matmul", "softmax_lastdim",
]


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent; names the offending dimension."""


_FLOAT_DTYPES = (np.float32, np.float64)
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf assertions after every forward op (slow, test use)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """Dense N-dimensional array of real values, row-major."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is None and not (isinstance(data, (np.ndarray, np.generic))
                                  and data.dtype in _FLOAT_DTYPES):
            dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # arithmetic sugar; all route through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class _Node:
    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs, out, backward_fn):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of differentiable ops, in topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False

    def __len__(self):
        return len(self.nodes)


_tape_stack: list[Optional[Tape]] = []


def _push_tape(tape: Optional[Tape]) -> None:
    _tape_stack.append(tape)


def _pop_tape(tape: Optional[Tape]) -> None:
    popped = _tape_stack.pop()
    if popped is not tape:
        raise RuntimeError("tape stack corrupted (unbalanced enter/exit)")


def _active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def grad_enabled() -> bool:
    return _active_tape() is not None


class no_grad:
    """Context manager masking any active tape."""

    def __enter__(self):
        _push_tape(None)

    def __exit__(self, *exc):
        _pop_tape(None)
        return False


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap a forward result; record a node if a tape is active and grads flow."""
    if _DEBUG_CHECKS and not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced by a forward op")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce a broadcasted gradient back to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise binary / unary
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _make(ad + bd, (a, b),
                 lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _make(ad - bd, (a, b),
                 lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def erf(a: Tensor) -> Tensor:
    ad = a.data
    out = _special.erf(ad).astype(ad.dtype, copy=False)
    two_over_sqrt_pi = 1.1283791670955126
    return _make(out, (a,),
                 lambda g: (g * (two_over_sqrt_pi * np.exp(-ad * ad)),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,))


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    return _make(ad * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _special.expit(a.data).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    ad = a.data
    cdf = 0.5 * (1.0 + _special.erf(ad * _INV_SQRT2))
    cdf = cdf.astype(ad.dtype, copy=False)
    return _make(ad * cdf, (a,),
                 lambda g: (g * (cdf + ad * _INV_SQRT_2PI * np.exp(-0.5 * ad * ad)),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    axes = _norm_axes(axis, ad.ndim)
    out = ad.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, ad.shape).astype(ad.dtype, copy=False),)

    return _make(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    axes = _norm_axes(axis, ad.ndim)
    count = 1
    for ax in axes:
        count *= ad.shape[ax]
    out = ad.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, ad.shape).astype(ad.dtype, copy=False),)

    return _make(out, (a,), bwd)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; gradient routes to the first argmax in scan order."""
    ad = a.data
    if axis is None:
        out = ad.max()
        idx = int(np.argmax(ad))

        def bwd(g):
            grad = np.zeros_like(ad)
            grad.flat[idx] = np.asarray(g).reshape(())
            return (grad,)

        return _make(np.asarray(out), (a,), bwd)

    ax = axis % ad.ndim
    out = ad.max(axis=ax, keepdims=keepdims)
    idx = np.argmax(ad, axis=ax)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        grad = np.zeros_like(ad)
        np.put_along_axis(grad, np.expand_dims(idx, ax), g, axis=ax)
        return (grad,)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    ad = a.data
    return _make(ad.reshape(shape), (a,), lambda g: (g.reshape(ad.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate(datas, axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    ad = a.data
    sl = [slice(None)] * ad.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g):
        grad = np.zeros_like(ad)
        grad[sl] = g
        return (grad,)

    return _make(np.ascontiguousarray(ad[sl]), (a,), bwd)


def roll(a: Tensor, shift, axis) -> Tensor:
    shift = tuple(np.atleast_1d(shift))
    axis = tuple(np.atleast_1d(axis))
    neg_shift = tuple(-s for s in shift)
    return _make(np.roll(a.data, shift, axis=axis), (a,),
                 lambda g: (np.roll(g, neg_shift, axis=axis),))


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """out[i...] = table[index[i...]]; scatter-add on the way back."""
    idx = np.asarray(index)
    td = table.data

    def bwd(g):
        grad = np.zeros_like(td)
        np.add.at(grad, idx.reshape(-1), g.reshape(-1, *td.shape[1:]))
        return (grad,)

    return _make(td[idx], (table,), bwd)


def gather_pixels(a: Tensor, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Pick per-channel values at pixel coordinates: (C,H,W) -> (C,M)."""
    ad = a.data
    ys = np.asarray(ys, dtype=np.intp)
    xs = np.asarray(xs, dtype=np.intp)
    cc = np.arange(ad.shape[0], dtype=np.intp)[:, None]

    def bwd(g):
        grad = np.zeros_like(ad)
        np.add.at(grad, (cc, ys[None, :], xs[None, :]), g)
        return (grad,)

    return _make(ad[:, ys, xs], (a,), bwd)


# ---------------------------------------------------------------------------
# matmul / softmax
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {ad.shape[-1]} (lhs last) vs {bd.shape[-2]} (rhs second-to-last)")

    def bwd(g):
        da = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape) if a.requires_grad else None
        db = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape) if b.requires_grad else None
        return (da, db)

    return _make(ad @ bd, (a, b), bwd)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, max-shifted for stability."""
    ad = a.data
    shifted = ad - ad.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> dict:
    """Reverse-accumulate d(loss)/d(leaf) for every reachable grad-requiring leaf.

    Returns a map {Tensor: ndarray}. The walk visits nodes in strict reverse
    append order; each tensor's gradient buffer is accumulated exactly once
    per consumer and popped when its producing node is reached.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    produced = {node.out for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out, None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, ig in zip(node.inputs, input_grads):
            if ig is None or not t.requires_grad:
                continue
            prev = grads.get(t)
            grads[t] = ig if prev is None else prev + ig
    # whatever remains was never produced by a node: the leaves
    return {t: g for t, g in grads.items() if t not in produced}

"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient. Outside a tape every primitive is a plain numpy
evaluation, so a frozen model can be evaluated without bookkeeping.

    >>> x = Var(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> float(tape.backward(y, [x])[x.id])
    6.0

Gradients are returned in a fresh dict and written to ``leaf.grad`` for the
requested leaves only. The tape is not cleared by ``backward``; it can be
replayed for a different root, and is released by dropping the object or
calling :meth:`Tape.clear`.
"""

from __future__ import annotations

import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_ids = itertools.count()
_state = threading.local()

LAYER_NORM_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class Var:
    """A value array plus its accumulated gradient."""

    __slots__ = ("value", "_grad", "requires_grad", "id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match value shape {self.value.shape}")
        self._grad = g

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nesting is allowed and the innermost tape
    receives the records.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()

    def backward(self, root: Var, leaves: Iterable[Var]) -> dict[int, np.ndarray]:
        """Reverse-mode gradients of a scalar ``root`` w.r.t. ``leaves``.

        Unreachable leaves get zero gradients. Only the requested leaves have
        their ``grad`` attribute overwritten.
        """
        if root.value.size != 1:
            raise ShapeError(f"backward requires scalar root, got shape {root.shape}")
        leaves = list(leaves)
        adj: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
        for rec in reversed(self.records):
            g = adj.get(rec.output.id)
            if g is None:
                continue
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                prev = adj.get(inp.id)
                adj[inp.id] = gi if prev is None else prev + gi
        out = {}
        for leaf in leaves:
            g = adj.get(leaf.id)
            g = np.zeros_like(leaf.value) if g is None else np.broadcast_to(g, leaf.shape).copy()
            leaf.grad = g
            out[leaf.id] = g
        return out

    def first_nonfinite(self) -> str | None:
        """Name the earliest recorded activation holding a NaN or Inf."""
        for i, rec in enumerate(self.records):
            for v in rec.inputs:
                if v.name is not None and not np.all(np.isfinite(v.value)):
                    return f"parameter {v.name}"
            if not np.all(np.isfinite(rec.output.value)):
                return f"activation #{i} ({rec.backward.__qualname__.split('.')[0]})"
        return None


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def backward(root: Var, leaves: Sequence[Var], tape: Tape | None = None) -> dict[int, np.ndarray]:
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("no tape recorded the computation")
    return tape.backward(root, leaves)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _emit(value, inputs: tuple[Var, ...], bw: Callable) -> Var:
    out = Var(value)
    tape = active_tape()
    if tape is not None and any(v.requires_grad for v in inputs):
        out.requires_grad = True
        tape.records.append(_Record(inputs, out, bw))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Var, b: Var):
    sa, sb = a.value.shape, b.value.shape
    if sa == sb or not sb or not sa:
        return
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit(a.value + b.value, (a, b), bw)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _emit(a.value - b.value, (a, b), bw)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return (_unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.value, b.shape) if b.requires_grad else None)

    return _emit(a.value * b.value, (a, b), bw)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast("div", a, b)
    out = a.value / b.value

    def bw(g):
        ga = g / b.value
        return (_unbroadcast(ga, a.shape) if a.requires_grad else None,
                _unbroadcast(-ga * out, b.shape) if b.requires_grad else None)

    return _emit(out, (a, b), bw)


def neg(a) -> Var:
    a = as_var(a)
    return _emit(-a.value, (a,), lambda g: (-g,))


def square(a) -> Var:
    a = as_var(a)
    return _emit(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def sqrt(a) -> Var:
    """Square root with a zero subgradient at the origin."""
    a = as_var(a)
    out = np.sqrt(a.value)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _emit(out, (a,), bw)


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return _emit(out, (a,), lambda g: (g * out,))


def absolute(a) -> Var:
    a = as_var(a)
    return _emit(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def pairwise_sqdist(x) -> Var:
    """Squared Euclidean distances between rows: (..., N, D) -> (..., N, N).

    The forward pass uses explicit differences so the diagonal is exactly zero
    and the result exactly symmetric.
    """
    x = as_var(x)
    if x.ndim < 2:
        raise ShapeError(f"pairwise_sqdist expects (..., N, D), got {x.shape}")
    v = x.value
    diff = v[..., :, None, :] - v[..., None, :, :]
    out = np.einsum("...ijd,...ijd->...ij", diff, diff)

    def bw(g):
        gs = g + np.swapaxes(g, -1, -2)
        return (2.0 * (gs.sum(axis=-1)[..., None] * v - gs @ v),)

    return _emit(out, (x,), bw)


def where(cond, a, b) -> Var:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_var(a), as_var(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.value, b.value)

    def bw(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _emit(out, (a, b), bw)


# -- linear algebra and shape ---------------------------------------------

def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        if a.ndim > 2 and b.ndim > 2:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return (_matmul_grad_left(g, a, b) if a.requires_grad else None,
                _matmul_grad_right(g, a, b) if b.requires_grad else None)

    return _emit(a.value @ b.value, (a, b), bw)


def _matmul_grad_left(g, a: Var, b: Var):
    if a.ndim == 2 and g.ndim > 2:
        # shared left operand: fold the batch axes into the contraction
        bb = np.broadcast_to(b.value, (*g.shape[:-2], *b.shape[-2:]))
        gt = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
        return gt @ np.moveaxis(bb, -2, 0).reshape(b.shape[-2], -1).T
    return _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)


def _matmul_grad_right(g, a: Var, b: Var):
    if b.ndim == 2 and g.ndim > 2:
        return a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)


def transpose(a) -> Var:
    """Swap the last two axes."""
    a = as_var(a)
    return _emit(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Var:
    a = as_var(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(parts: Sequence, axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or np.delete(p.shape, axis).tolist() != np.delete(ref, axis).tolist():
            raise ShapeError(f"concat: incompatible shapes {ref} and {p.shape}")
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), bw)


def getitem(a, key) -> Var:
    a = as_var(a)
    out = a.value[key]

    fancy = any(isinstance(k, (list, np.ndarray)) for k in (key if isinstance(key, tuple) else (key,)))

    def bw(g):
        full = np.zeros_like(a.value)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _emit(np.array(out, dtype=np.float64), (a,), bw)


def sum(a, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    a = as_var(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _emit(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- nonlinearities ---------------------------------------------------------

def softmax(a) -> Var:
    """Softmax over the last axis."""
    a = as_var(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (a,), bw)


def gelu(a) -> Var:
    """Exact GeLU, x * Phi(x)."""
    a = as_var(a)
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _emit(x * cdf, (a,), bw)


def elu(a) -> Var:
    a = as_var(a)
    x = a.value
    neg_part = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    return _emit(out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg_part + 1.0),))


def relu(a) -> Var:
    a = as_var(a)
    return _emit(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0),))


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Var:
    """Normalize the last axis to zero mean and unit variance, no affine."""
    a = as_var(a)
    mu = a.value.mean(axis=-1, keepdims=True)
    xc = a.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit(xhat, (a,), bw)


def dropout(a, mask, p: float) -> Var:
    """Apply a caller-supplied binary keep-mask with inverted scaling 1/(1-p).

    ``mask`` may carry extra leading axes (e.g. a Monte Carlo sample axis);
    ``a`` is broadcast against it.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    a = as_var(a)
    scale = np.asarray(mask, dtype=np.float64) * (1.0 / (1.0 - p))
    try:
        np.broadcast_shapes(a.shape, scale.shape)
    except ValueError:
        raise ShapeError(f"dropout: mask shape {scale.shape} does not fit input shape {a.shape}") from None
    return _emit(a.value * scale, (a,), lambda g: (_unbroadcast(g * scale, a.shape),))

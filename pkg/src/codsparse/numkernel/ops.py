"""Differentiable tensor operations.

Every op computes its forward value eagerly with numpy (matrix products go
through :mod:`kernels`) and, when a :class:`Graph` is active and some input
requires a gradient, records a vector-Jacobian product closure.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .tensor import (
    DegenerateError,
    DimensionError,
    Tensor,
    active_graph,
    as_tensor,
)


def _make(value: np.ndarray, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    graph = active_graph()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs, copy=False)
    if needs:
        graph.record(out, inputs, vjp, op)
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def vjp(g):
        return (g * (sig + out * (1.0 - sig)),)

    return _make(out, (x,), vjp, "silu")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (x,), vjp, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axes, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = kernels.matmul(ad, bd)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = kernels.matmul(g, kernels.swap_last(bd))
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                flat_a = ad.reshape(-1, k)
                gb = kernels.matmul2d(kernels.swap_last(flat_a), g.reshape(-1, g.shape[-1]))
            else:
                gb = kernels.matmul(kernels.swap_last(ad), g)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    if not xs:
        raise DimensionError("concat: nothing to join")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, xs, vjp, "concat")


def repeat_heads(x, groups: int, axis: int = 1) -> Tensor:
    """Repeat every slice along ``axis`` ``groups`` times consecutively.

    Head ``h`` of the result is head ``h // groups`` of the input, which is
    how key/value heads are shared across query groups.
    """
    x = as_tensor(x)
    if groups == 1:
        return x
    axis %= x.ndim
    shape = x.shape
    out = np.repeat(x.data, groups, axis=axis)

    def vjp(g):
        split = shape[:axis] + (shape[axis], groups) + shape[axis + 1:]
        return (g.reshape(split).sum(axis=axis + 1),)

    return _make(out, (x,), vjp, "repeat_heads")


def take_rows(table, ids) -> Tensor:
    """``table[ids]`` for an integer array; gradients scatter-add back."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < -n or ids.max() >= n):
        raise DimensionError(f"take_rows: index out of range for {n} rows")
    out = table.data[ids]
    shape = table.shape

    def vjp(g):
        grad = np.zeros(shape)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, *shape[1:]))
        return (grad,)

    return _make(out, (table,), vjp, "take_rows")


def index_add_rows(n_rows: int, ids, values) -> Tensor:
    """Zeros of ``(n_rows, ...)`` with ``values`` added at rows ``ids`` in order."""
    values = as_tensor(values)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != values.shape[:1]:
        raise DimensionError(f"index_add_rows: {ids.shape} ids for {values.shape} values")
    out = np.zeros((n_rows, *values.shape[1:]))
    np.add.at(out, ids, values.data)
    return _make(out, (values,), lambda g: (g[ids],), "index_add_rows")


def take_along_last(x, ids) -> Tensor:
    """Per-row gather on the last axis, as ``np.take_along_axis``."""
    x = as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    out = np.take_along_axis(x.data, ids, axis=-1)
    shape = x.shape

    def vjp(g):
        grad = np.zeros(shape)
        lead = np.indices(ids.shape, sparse=True)[:-1]
        np.add.at(grad, (*lead, ids), g)
        return (grad,)

    return _make(out, (x,), vjp, "take_along_last")


# ---------------------------------------------------------------------------
# normalization, attention pieces, losses
# ---------------------------------------------------------------------------

def rmsnorm(x, gain, eps: float) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.shape != x.shape[-1:]:
        raise DimensionError(f"rmsnorm: gain {gain.shape} vs features {x.shape[-1:]}")
    xd = x.data
    inv = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    normed = xd * inv
    gd = gain.data
    out = normed * gd

    def vjp(g):
        dn = g * gd
        dx = inv * (dn - normed * np.mean(dn * normed, axis=-1, keepdims=True))
        dgain = (g * normed).reshape(-1, gd.shape[0]).sum(axis=0)
        return dx, dgain

    return _make(out, (x, gain), vjp, "rmsnorm")


def rope_tables(positions, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape ``(len(positions), head_dim // 2)``."""
    if head_dim % 2:
        raise DimensionError(f"rotary embedding needs an even head dim, got {head_dim}")
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def rope(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate-half rotary embedding on ``(..., T, head_dim)``."""
    x = as_tensor(x)
    half = x.shape[-1] // 2
    if cos.shape != (x.shape[-2], half):
        raise DimensionError(f"rope: table {cos.shape} for input {x.shape}")
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def vjp(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _make(out, (x,), vjp, "rope")


def causal_mask(n_query: int, n_key: int | None = None) -> np.ndarray:
    """Boolean keep-mask; query ``i`` sees keys ``j <= i + (n_key - n_query)``."""
    n_key = n_query if n_key is None else n_key
    offset = n_key - n_query
    return np.arange(n_key)[None, :] <= np.arange(n_query)[:, None] + offset


def softmax_rows(x, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = keep) broadcasts against ``x``.

    Masked entries come out exactly zero.  A row with nothing kept raises
    :class:`DegenerateError`.
    """
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        keep = np.broadcast_to(mask, xd.shape)
        if not keep.any(axis=-1).all():
            raise DegenerateError("softmax_rows: a row has every entry masked")
        xd = np.where(keep, xd, -np.inf)
    peak = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - peak)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), vjp, "softmax_rows")


def logsumexp_rows(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    peak = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - peak)
    total = e.sum(axis=-1, keepdims=True)
    out = (peak + np.log(total))[..., 0]
    probs = e / total

    def vjp(g):
        return (g[..., None] * probs,)

    return _make(out, (x,), vjp, "logsumexp_rows")


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row logits."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise DimensionError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    n, vocab = logits.shape
    if n == 0:
        raise DimensionError("cross_entropy: no targets")
    if targets.min() < 0 or targets.max() >= vocab:
        raise DimensionError("cross_entropy: target id out of range")
    xd = logits.data
    peak = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - peak)
    total = e.sum(axis=-1, keepdims=True)
    lse = peak[:, 0] + np.log(total[:, 0])
    rows = np.arange(n)
    value = np.mean(lse - xd[rows, targets])

    def vjp(g):
        grad = e / total
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return _make(np.asarray(value), (logits,), vjp, "cross_entropy")

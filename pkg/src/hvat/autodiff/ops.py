"""Differentiable operations over :class:`Tensor`.

Binary pointwise ops follow numpy broadcasting; their backward pass sums
the upstream gradient over broadcast axes.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .instrument import LAYER_NORM_FLOPS, SOFTMAX_FLOPS, record
from .tensor import ShapeError, Tensor, make_result

LN_EPS = 1e-5


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    raise TypeError("at least one operand must be a Tensor")


def _broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast(a, b, "add")
    out = a.data + b.data
    record("add", out.size)
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast(a, b, "sub")
    out = a.data - b.data
    record("sub", out.size)
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast(a, b, "mul")
    out = a.data * b.data
    record("mul", out.size)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return make_result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast(a, b, "div")
    out = a.data / b.data
    record("div", out.size)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)

    return make_result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    record("neg", a.size)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., p, q] @ [..., q, r]``.

    Leading dims broadcast; the gradient of a broadcast operand is summed
    over the broadcast dims.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} are not broadcastable") from None
    ad, bd = a.data, b.data
    out = ad @ bd
    record("matmul", 2 * out.size * ad.shape[-1])

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    record("relu", out.size)
    return make_result(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    record("sigmoid", out.size)
    return make_result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    record("exp", out.size)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    d = x.data
    record("log", d.size)
    return make_result(np.log(d), (x,), lambda g: (g / d,), "log")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Normalized exponentials along ``axis`` (max-subtracted)."""
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    record("softmax", SOFTMAX_FLOPS * out.size)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    record("log_softmax", SOFTMAX_FLOPS * out.size)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    record("sum", x.size)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean; the backward pass spreads the gradient evenly."""
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        for ax in axes:
            _check_axis(x, ax)
        n = int(np.prod([x.shape[ax] for ax in axes]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    record("mean", x.size)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).astype(x.dtype),)

    return make_result(out, (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = np.swapaxes(x.data, a, b)
    return make_result(out, (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def expand_dims(x: Tensor, axis: int) -> Tensor:
    out = np.expand_dims(x.data, axis)
    src = x.shape
    return make_result(out, (x,), lambda g: (g.reshape(src),), "expand_dims")


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(out, copy=True), (x,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join along ``axis``; the backward pass slices the upstream gradient."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(out, tuple(tensors), backward, "concat")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize each row over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    record("layer_norm", LAYER_NORM_FLOPS * out.size)
    lead = tuple(range(d.ndim - 1))
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = rstd * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gain, bias), backward, "layer_norm")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; repeated ids accumulate gradient."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]
    shape, dtype = table.shape, table.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return make_result(out, (table,), backward, "embedding")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    record("dropout", x.size)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def _check_axis(x: Tensor, axis: int) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")


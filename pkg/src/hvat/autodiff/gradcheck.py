"""Central-difference gradient verification.

The checked function must be deterministic; with a stochastic function
(e.g. active dropout) the comparison is meaningless. Checks run in the
widest float numpy offers (``np.longdouble``; 80-bit extended on x86-64,
plain float64 elsewhere). The extra bits matter for gradients that are zero
by construction: float64 roundoff in f(x+h) - f(x-h) is ~1e-11, which the
1e-8 floor of the error metric turns into a relative error near 1e-3.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np

from . import ops
from .tensor import Tensor, backward

H_MIN, H_MAX = 1e-6, 1e-3
DEFAULT_H = 1e-5
WIDEST = np.longdouble
_ACCEPTED = (np.dtype(np.float64), np.dtype(WIDEST))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1e-8) over elements."""
    a = np.asarray(analytic, dtype=WIDEST).ravel()
    n = np.asarray(numeric, dtype=WIDEST).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = DEFAULT_H) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x.data``, perturbed in place."""
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    out = np.empty(flat.size, dtype=x.dtype)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().data[()]
        flat[i] = orig - h
        fm = f().data[()]
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def grad_check_many(f: Callable[[], Tensor], tensors: Mapping[str, Tensor], h: float = DEFAULT_H) -> dict[str, float]:
    """Max relative error of the analytic gradient for each named tensor (float64 or wider)."""
    if not H_MIN <= h <= H_MAX:
        raise ValueError(f"step h={h} outside [{H_MIN}, {H_MAX}]")
    for name, t in tensors.items():
        if t.dtype not in _ACCEPTED:
            raise TypeError(f"{name}: gradient checks need float64 or wider data, got {t.dtype}")
        t.requires_grad = True
        t.grad = None
    loss = f()
    backward(loss, inputs=tensors.values())
    analytic = {name: t.grad.copy() for name, t in tensors.items()}
    return {name: relative_error(analytic[name], numeric_grad(f, t, h)) for name, t in tensors.items()}


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = DEFAULT_H) -> float:
    """Max relative error between backprop and central differences for ``f(x)``."""
    xw = Tensor(np.array(x.data, dtype=WIDEST, copy=True))
    return grad_check_many(lambda: f(xw), {"x": xw}, h)["x"]


def _away_from_zero(rng, shape, lo=0.2):
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _case(fn, **inputs):
    return fn, {k: Tensor(np.asarray(v, dtype=WIDEST)) for k, v in inputs.items()}


# Each builder returns (fn(**tensors) -> Tensor, named inputs).
OP_CASES: dict[str, Callable[[np.random.Generator], tuple]] = {
    "add": lambda r: _case(ops.add, a=r.normal(size=(3, 4)), b=r.normal(size=(4,))),
    "sub": lambda r: _case(ops.sub, a=r.normal(size=(2, 3)), b=r.normal(size=(2, 3))),
    "mul": lambda r: _case(ops.mul, a=r.normal(size=(2, 3, 4)), b=r.normal(size=(1, 4))),
    "div": lambda r: _case(ops.div, a=r.normal(size=(3, 2)), b=r.uniform(0.5, 2.0, size=(3, 2))),
    "neg": lambda r: _case(ops.neg, a=r.normal(size=(4,))),
    "matmul": lambda r: _case(ops.matmul, a=r.normal(size=(2, 3, 4)), b=r.normal(size=(4, 5))),
    "matmul_batched": lambda r: _case(ops.matmul, a=r.normal(size=(2, 1, 3, 4)), b=r.normal(size=(3, 4, 2))),
    "relu": lambda r: _case(ops.relu, x=_away_from_zero(r, (3, 5))),
    "sigmoid": lambda r: _case(ops.sigmoid, x=r.normal(scale=2.0, size=(3, 4))),
    "exp": lambda r: _case(ops.exp, x=r.normal(size=(5,))),
    "log": lambda r: _case(ops.log, x=r.uniform(0.5, 3.0, size=(5,))),
    "softmax": lambda r: _case(lambda x: ops.softmax(x, axis=-1), x=r.normal(size=(3, 5))),
    "softmax_axis0": lambda r: _case(lambda x: ops.softmax(x, axis=0), x=r.normal(size=(4, 3))),
    "log_softmax": lambda r: _case(lambda x: ops.log_softmax(x, axis=-1), x=r.normal(size=(3, 5))),
    "sum": lambda r: _case(lambda x: ops.sum(x, axis=1), x=r.normal(size=(3, 4))),
    "mean": lambda r: _case(lambda x: ops.mean(x, axis=0), x=r.normal(size=(3, 4))),
    "reshape": lambda r: _case(lambda x: ops.reshape(x, (6, 2)), x=r.normal(size=(3, 4))),
    "swapaxes": lambda r: _case(lambda x: ops.swapaxes(x, 0, 2), x=r.normal(size=(2, 3, 4))),
    "expand_dims": lambda r: _case(lambda x: ops.expand_dims(x, -3), x=r.normal(size=(3, 4))),
    "index": lambda r: _case(lambda x: ops.index(x, (slice(None), slice(1, 3))), x=r.normal(size=(3, 4))),
    "concat": lambda r: _case(lambda a, b: ops.concat([a, b], axis=-1), a=r.normal(size=(3, 2)), b=r.normal(size=(3, 4))),
    "layer_norm": lambda r: _case(
        ops.layer_norm, x=r.normal(size=(3, 6)), gain=r.normal(size=(6,)), bias=r.normal(size=(6,))
    ),
    "embedding": lambda r: _case(lambda t: ops.embedding(t, np.array([[0, 2, 2], [1, 3, 0]])), t=r.normal(size=(4, 3))),
}


def check_op(name: str, seed: int = 0, h: float = DEFAULT_H) -> float:
    """Gradient-check one registered op under a fixed random projection."""
    rng = np.random.default_rng(seed)
    fn, inputs = OP_CASES[name](rng)
    out_shape = fn(**inputs).shape
    proj = Tensor(rng.normal(size=out_shape).astype(WIDEST))

    def f():
        return ops.sum(ops.mul(fn(**inputs), proj))

    errors = grad_check_many(f, inputs, h)
    return max(errors.values())

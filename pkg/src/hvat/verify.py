"""Gradient-check suite: every registered op plus whole blocks of each variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionParams,
    BlockParams,
    attention_param_specs,
    attention_sublayer,
    block_forward,
    block_param_specs,
    causal_mask,
    causal_pool,
    materialize,
)
from .autodiff import Tensor, ops
from .autodiff.gradcheck import DEFAULT_H, OP_CASES, WIDEST, check_op, grad_check_many
from .config import AttentionConfig, BlockVariant, ConfigError

THRESHOLD = 1e-4
MAX_N, MAX_D = 8, 16


@dataclass(frozen=True)
class Dims:
    n: int = 3
    d: int = 8
    m: int = 2
    d_a: int = 2

    @classmethod
    def parse(cls, text: str) -> Dims:
        """Parse ``"N=3,D=8,M=2,Da=2"``; omitted keys keep their defaults."""
        keys = {"n": "n", "d": "d", "m": "m", "da": "d_a"}
        vals = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            k, sep, v = part.partition("=")
            if not sep or k.strip().lower() not in keys:
                raise ConfigError(f"dims: cannot parse {part!r} (expected N=,D=,M=,Da=)")
            try:
                vals[keys[k.strip().lower()]] = int(v)
            except ValueError:
                raise ConfigError(f"dims: {k} needs an integer, got {v!r}") from None
        return cls(**vals)

    def validate(self) -> None:
        if not (1 <= self.n <= MAX_N and 2 <= self.d <= MAX_D):
            raise ConfigError(f"dims: gradient checks are limited to N<={MAX_N}, D<={MAX_D}")
        if self.m < 1 or self.d % self.m:
            raise ConfigError(f"dims: M={self.m} must divide D={self.d}")
        AttentionConfig(self.d, self.m, self.d // self.m, self.d // self.m, self.d_a)


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return bool(self.error < THRESHOLD)


def _random_params(specs, rng) -> dict[str, Tensor]:
    # Random (nonzero) values everywhere, gates included: zero gates would hide their own gradients.
    params = materialize(specs, rng, WIDEST)
    for t in params.values():
        t.data = rng.normal(scale=0.5, size=t.shape).astype(WIDEST)
    return params


def _projected(fn, shape, rng):
    proj = Tensor(rng.normal(size=shape).astype(WIDEST))
    return lambda: ops.sum(ops.mul(fn(), proj))


def block_errors(variant, dims: Dims = Dims(), seed: int = 0, h: float = DEFAULT_H) -> dict[str, float]:
    """Relative errors for every parameter and the input of one self-attention block."""
    variant = BlockVariant.parse(variant)
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(dims.d, dims.m, dims.d // dims.m, dims.d // dims.m, dims.d_a)
    named = _random_params(block_param_specs(cfg, variant, 2 * dims.d), rng)
    params = BlockParams.from_named(named)
    x = Tensor(rng.normal(size=(dims.n, dims.d)).astype(WIDEST))
    f = _projected(lambda: block_forward(x, variant, params), (dims.n, dims.d), rng)
    return grad_check_many(f, {"x": x, **named}, h)


def cross_errors(variant, dims: Dims = Dims(), seed: int = 0, h: float = DEFAULT_H) -> dict[str, float]:
    """Decoder-style attention sublayer: memory keys, causal mask and prefix pooling."""
    variant = BlockVariant.parse(variant)
    rng = np.random.default_rng(seed + 1)
    cfg = AttentionConfig(dims.d, dims.m, dims.d // dims.m, dims.d // dims.m, dims.d_a)
    named = _random_params(attention_param_specs(cfg, variant), rng)
    params = AttentionParams.from_named(named)
    x = Tensor(rng.normal(size=(dims.n, dims.d)).astype(WIDEST))
    mem = Tensor(rng.normal(size=(dims.n, dims.d)).astype(WIDEST))
    mask, pool = causal_mask(dims.n, WIDEST), causal_pool(dims.n, dtype=WIDEST)

    def fwd():
        return attention_sublayer(x, variant, params, memory=mem, mask=mask, pool=pool)

    f = _projected(fwd, (dims.n, dims.d), rng)
    return grad_check_many(f, {"x": x, "memory": mem, **named}, h)


def run_suite(variants=tuple(BlockVariant), dims: Dims = Dims(), seed: int = 0, h: float = DEFAULT_H) -> list[CheckResult]:
    dims.validate()
    results = [CheckResult(f"op.{name}", float(check_op(name, seed, h))) for name in OP_CASES]
    for v in variants:
        v = BlockVariant.parse(v)
        for kind, fn in (("block", block_errors), ("cross", cross_errors)):
            errs = fn(v, dims, seed, h)
            worst = max(errs, key=errs.get)
            results.append(CheckResult(f"{kind}.{v.value}[{worst}]", float(errs[worst])))
    return results

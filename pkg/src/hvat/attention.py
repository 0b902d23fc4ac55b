"""Scaled dot-product attention, multi-head attention and the two augmentations.

Horizontal attention re-weights each head's output by a simplex weight
before the heads are concatenated and projected. Vertical attention gates
the projected output channel-wise with a sigmoid vector.

Shapes follow a batch-agnostic convention: activations are ``[..., N, D]``
and the per-head stack is ``[..., M, N, D_v]``. Token pooling is a constant
row-stochastic matrix ``[..., N_q, N]``. Encoder pooling has one row (the
mean over valid tokens); decoder pooling is causal, one prefix-mean row
per query position, so no position sees later tokens through the gates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, is_debug, ops, section
from .config import AttentionConfig, BlockVariant, ConfigError

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # "uniform", "zeros" or "ones"
    fan_in: int = 1


def attention_param_specs(cfg: AttentionConfig, variant: BlockVariant, prefix: str = "") -> list[ParamSpec]:
    variant = BlockVariant.parse(variant)
    D, M, Dk, Dv, Da = cfg.d_model, cfg.n_heads, cfg.d_k, cfg.d_v, cfg.d_a
    specs = [
        ParamSpec(prefix + "w_q", (M, D, Dk), "uniform", D),
        ParamSpec(prefix + "w_k", (M, D, Dk), "uniform", D),
        ParamSpec(prefix + "w_v", (M, D, Dv), "uniform", D),
        ParamSpec(prefix + "w_o", (M * Dv, D), "uniform", M * Dv),
    ]
    if variant.horizontal:
        specs += [
            ParamSpec(prefix + "hor.w_a1", (Dv, Dv), "uniform", Dv),
            ParamSpec(prefix + "hor.w_a2", (D, Dv), "uniform", D),
            ParamSpec(prefix + "hor.w_b", (Dv,), "zeros"),
            ParamSpec(prefix + "hor.b_b", (), "zeros"),
        ]
    if variant.vertical:
        specs += [
            ParamSpec(prefix + "ver.w_u1", (D, Da), "uniform", D),
            ParamSpec(prefix + "ver.w_u2", (D, Da), "uniform", D),
            ParamSpec(prefix + "ver.w_u", (Da, D), "zeros"),
            ParamSpec(prefix + "ver.b_u", (D,), "zeros"),
        ]
    return specs


def layer_norm_specs(d: int, prefix: str) -> list[ParamSpec]:
    return [ParamSpec(prefix + "gain", (d,), "ones"), ParamSpec(prefix + "bias", (d,), "zeros")]


def ffn_specs(d: int, width: int, prefix: str) -> list[ParamSpec]:
    return [
        ParamSpec(prefix + "w1", (d, width), "uniform", d),
        ParamSpec(prefix + "b1", (width,), "zeros"),
        ParamSpec(prefix + "w2", (width, d), "uniform", width),
        ParamSpec(prefix + "b2", (d,), "zeros"),
    ]


def block_param_specs(cfg: AttentionConfig, variant: BlockVariant, ffn_width: int, prefix: str = "") -> list[ParamSpec]:
    return (
        attention_param_specs(cfg, variant, prefix + "attn.")
        + layer_norm_specs(cfg.d_model, prefix + "attn_norm.")
        + ffn_specs(cfg.d_model, ffn_width, prefix + "ffn.")
        + layer_norm_specs(cfg.d_model, prefix + "ffn_norm.")
    )


def materialize(specs: list[ParamSpec], rng: np.random.Generator, dtype="float64") -> dict[str, Tensor]:
    """Create parameters in spec order; uniform(+-1/sqrt(fan_in)) for matrices."""
    out = {}
    for s in specs:
        if s.init == "uniform":
            bound = 1.0 / math.sqrt(s.fan_in)
            data = rng.uniform(-bound, bound, size=s.shape)
        elif s.init == "ones":
            data = np.ones(s.shape)
        else:
            data = np.zeros(s.shape)
        out[s.name] = Tensor(data.astype(dtype), requires_grad=True)
    return out


@dataclass
class HorizontalParams:
    w_a1: Tensor
    w_a2: Tensor
    w_b: Tensor
    b_b: Tensor


@dataclass
class VerticalParams:
    w_u1: Tensor
    w_u2: Tensor
    w_u: Tensor
    b_u: Tensor


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    horizontal: HorizontalParams | None = None
    vertical: VerticalParams | None = None

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[0]

    def named_parameters(self, prefix: str = ""):
        yield prefix + "w_q", self.w_q
        yield prefix + "w_k", self.w_k
        yield prefix + "w_v", self.w_v
        yield prefix + "w_o", self.w_o
        if self.horizontal is not None:
            for k in ("w_a1", "w_a2", "w_b", "b_b"):
                yield f"{prefix}hor.{k}", getattr(self.horizontal, k)
        if self.vertical is not None:
            for k in ("w_u1", "w_u2", "w_u", "b_u"):
                yield f"{prefix}ver.{k}", getattr(self.vertical, k)

    @classmethod
    def from_named(cls, p: dict[str, Tensor], prefix: str = "") -> AttentionParams:
        hor = ver = None
        if prefix + "hor.w_a1" in p:
            hor = HorizontalParams(*(p[f"{prefix}hor.{k}"] for k in ("w_a1", "w_a2", "w_b", "b_b")))
        if prefix + "ver.w_u1" in p:
            ver = VerticalParams(*(p[f"{prefix}ver.{k}"] for k in ("w_u1", "w_u2", "w_u", "b_u")))
        return cls(p[prefix + "w_q"], p[prefix + "w_k"], p[prefix + "w_v"], p[prefix + "w_o"], hor, ver)


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    def named_parameters(self, prefix: str = ""):
        yield prefix + "gain", self.gain
        yield prefix + "bias", self.bias


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self, prefix: str = ""):
        for k in ("w1", "b1", "w2", "b2"):
            yield prefix + k, getattr(self, k)


@dataclass
class BlockParams:
    attn: AttentionParams
    attn_norm: LayerNormParams
    ffn: FFNParams
    ffn_norm: LayerNormParams

    def named_parameters(self, prefix: str = ""):
        yield from self.attn.named_parameters(prefix + "attn.")
        yield from self.attn_norm.named_parameters(prefix + "attn_norm.")
        yield from self.ffn.named_parameters(prefix + "ffn.")
        yield from self.ffn_norm.named_parameters(prefix + "ffn_norm.")

    @classmethod
    def from_named(cls, p: dict[str, Tensor], prefix: str = "") -> BlockParams:
        return cls(
            AttentionParams.from_named(p, prefix + "attn."),
            _ln(p, prefix + "attn_norm."),
            FFNParams(*(p[prefix + "ffn." + k] for k in ("w1", "b1", "w2", "b2"))),
            _ln(p, prefix + "ffn_norm."),
        )


def _ln(p, prefix):
    return LayerNormParams(p[prefix + "gain"], p[prefix + "bias"])


def init_attention_params(cfg: AttentionConfig, variant: BlockVariant, rng, dtype="float64") -> AttentionParams:
    return AttentionParams.from_named(materialize(attention_param_specs(cfg, variant), rng, dtype))


def init_block_params(cfg: AttentionConfig, variant: BlockVariant, ffn_width: int, rng, dtype="float64") -> BlockParams:
    return BlockParams.from_named(materialize(block_param_specs(cfg, variant, ffn_width), rng, dtype))


@dataclass
class AlphaWeights:
    """Per-head weights, ``[..., M]`` (one row per pooled query position)."""

    alpha: np.ndarray

    def validate(self, tol: float = 1e-9) -> None:
        a = np.asarray(self.alpha, dtype=np.float64)
        if np.any(a < 0) or np.any(np.abs(a.sum(axis=-1) - 1) > tol):
            raise AssertionError("alpha left the probability simplex")


@dataclass
class BetaWeights:
    """Channel gates in the open interval (0, 1), ``[..., D]``."""

    beta: np.ndarray

    def validate(self) -> None:
        b = np.asarray(self.beta)
        if np.any(b <= 0) or np.any(b >= 1):
            raise AssertionError("beta left the open interval (0, 1)")


# Masks and pooling matrices (constants, never differentiated).


def causal_mask(n: int, dtype="float64") -> np.ndarray:
    return (np.triu(np.ones((n, n)), k=1) * MASK_VALUE).astype(dtype)


def key_padding_mask(valid: np.ndarray, dtype="float64") -> np.ndarray:
    """``valid[B, N]`` -> additive mask ``[B, 1, 1, N]`` (broadcasts over heads and queries)."""
    return np.where(valid, 0.0, MASK_VALUE).astype(dtype)[:, None, None, :]


def mean_pool(n: int, valid: np.ndarray | None = None, dtype="float64") -> np.ndarray:
    """Single-row pooling matrix: ``[1, n]`` or ``[B, 1, n]`` averaging valid tokens."""
    if valid is None:
        return np.full((1, n), 1.0 / n, dtype=dtype)
    w = valid.astype(np.float64)
    return (w / w.sum(axis=-1, keepdims=True))[:, None, :].astype(dtype)


def causal_pool(n: int, valid: np.ndarray | None = None, dtype="float64") -> np.ndarray:
    """Prefix-mean pooling: row i averages the valid tokens 0..i."""
    tri = np.tril(np.ones((n, n)))
    if valid is None:
        return (tri / tri.sum(axis=-1, keepdims=True)).astype(dtype)
    w = tri[None] * valid.astype(np.float64)[:, None, :]
    return (w / np.maximum(w.sum(axis=-1, keepdims=True), 1.0)).astype(dtype)


# Core attention.


def sdpa(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k) + mask) v. Returns (output, attention weights)."""
    dk = q.shape[-1]
    if k.shape[-1] != dk:
        raise ShapeError(f"sdpa: query width {q.shape} and key width {k.shape} differ")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"sdpa: keys {k.shape} and values {v.shape} differ in length")
    scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dk))
    if mask is not None:
        scores = ops.add(scores, mask)
    attn = ops.softmax(scores, axis=-1)
    return ops.matmul(attn, v), attn


def head_outputs(x: Tensor, params: AttentionParams, memory: Tensor | None = None, mask=None):
    """Stacked head outputs ``[..., M, N, D_v]`` and attention maps."""
    src = x if memory is None else memory
    xe = ops.expand_dims(x, -3)
    se = xe if memory is None else ops.expand_dims(src, -3)
    q = ops.matmul(xe, params.w_q)
    k = ops.matmul(se, params.w_k)
    v = ops.matmul(se, params.w_v)
    return sdpa(q, k, v, mask)


def merge_heads(heads: Tensor) -> Tensor:
    """``[..., M, N, D_v]`` -> ``[..., N, M*D_v]`` (head-major concatenation)."""
    *lead, m, n, dv = heads.shape
    return ops.reshape(ops.swapaxes(heads, -3, -2), (*lead, n, m * dv))


def multi_head(x: Tensor, params: AttentionParams, memory: Tensor | None = None, mask=None):
    """Returns (Y^M, heads, attention maps)."""
    with section("sdpa"):
        heads, attn = head_outputs(x, params, memory, mask)
        y = ops.matmul(merge_heads(heads), params.w_o)
    return y, heads, attn


def _default_pool(x: Tensor, pool):
    return mean_pool(x.shape[-2], dtype=x.dtype) if pool is None else np.asarray(pool, dtype=x.dtype)


def _alpha_stack(x: Tensor, heads: Tensor, hp: HorizontalParams, pool: np.ndarray) -> Tensor:
    """Head weights shaped ``[..., M, N_q, 1]`` for broadcasting against the head stack."""
    dv = heads.shape[-1]
    a = ops.relu(ops.add(ops.matmul(heads, hp.w_a1), ops.expand_dims(ops.matmul(x, hp.w_a2), -3)))
    b = ops.add(ops.matmul(a, ops.reshape(hp.w_b, (dv, 1))), hp.b_b)
    s = ops.matmul(np.expand_dims(pool, -3), b)
    alpha = ops.softmax(s, axis=-3)
    if is_debug():
        tol = 1e-9 if alpha.dtype == np.float64 else 1e-5
        AlphaWeights(np.moveaxis(alpha.data[..., 0], -2, -1)).validate(tol)
    return alpha


def _alpha_rows(alpha_stack: Tensor) -> Tensor:
    return ops.swapaxes(ops.reshape(alpha_stack, alpha_stack.shape[:-1]), -1, -2)


def horizontal_alpha(x: Tensor, heads: Tensor, params: AttentionParams, pool=None) -> Tensor:
    """alpha = softmax over heads of the pooled score of ReLU(H_m W^A1 + X W^A2) W^B + b^B.

    Returns ``[..., M]`` for single-row pooling, otherwise ``[..., N_q, M]``.
    """
    if params.horizontal is None:
        raise ConfigError("horizontal attention parameters are missing")
    single = pool is None
    rows = _alpha_rows(_alpha_stack(x, heads, params.horizontal, _default_pool(x, pool)))
    return ops.reshape(rows, rows.shape[:-2] + rows.shape[-1:]) if single else rows


def horizontal_attend(
    x: Tensor,
    params: AttentionParams,
    memory: Tensor | None = None,
    mask=None,
    pool=None,
    trace: list | None = None,
) -> Tensor:
    """Y^H = Concat(alpha_1 H_1, ..., alpha_M H_M) W^M."""
    if params.horizontal is None:
        raise ConfigError("horizontal attention parameters are missing")
    with section("sdpa"):
        heads, attn = head_outputs(x, params, memory, mask)
    y = _horizontal_from_heads(x, heads, params, _default_pool(x, pool), trace)
    if trace is not None:
        trace[-1]["attn"] = attn.data
    return y


def _horizontal_from_heads(x, heads, params, pool, trace):
    with section("horizontal"):
        alpha = _alpha_stack(x, heads, params.horizontal, pool)
        weighted = ops.mul(heads, alpha)
    with section("sdpa"):
        y = ops.matmul(merge_heads(weighted), params.w_o)
    if trace is not None:
        trace.append({"alpha": np.moveaxis(alpha.data[..., 0], -2, -1).copy()})
    return y


def _beta(x: Tensor, y: Tensor, vp: VerticalParams, pool: np.ndarray) -> Tensor:
    u = ops.relu(ops.add(ops.matmul(x, vp.w_u1), ops.matmul(y, vp.w_u2)))
    pooled = ops.matmul(pool, u)
    beta = ops.sigmoid(ops.add(ops.matmul(pooled, vp.w_u), vp.b_u))
    if is_debug():
        BetaWeights(beta.data).validate()
    return beta


def vertical_beta(x: Tensor, y: Tensor, params: AttentionParams, pool=None) -> Tensor:
    """beta = sigmoid(pool(ReLU(X W^U1 + Y W^U2)) W^U + b^U).

    Returns ``[..., D]`` for single-row pooling, otherwise ``[..., N_q, D]``.
    """
    if params.vertical is None:
        raise ConfigError("vertical attention parameters are missing")
    single = pool is None
    beta = _beta(x, y, params.vertical, _default_pool(x, pool))
    return ops.reshape(beta, beta.shape[:-2] + beta.shape[-1:]) if single else beta


def vertical_attend(x: Tensor, y: Tensor, params: AttentionParams, pool=None, trace: list | None = None) -> Tensor:
    """Y^V = beta * Y with beta broadcast over token rows."""
    if params.vertical is None:
        raise ConfigError("vertical attention parameters are missing")
    with section("vertical"):
        beta = _beta(x, y, params.vertical, _default_pool(x, pool))
        out = ops.mul(y, beta)
    if trace is not None:
        trace.append({"beta": beta.data.copy()})
    return out


def attention_sublayer(
    x: Tensor,
    variant: BlockVariant,
    params: AttentionParams,
    memory: Tensor | None = None,
    mask=None,
    pool=None,
    trace: list | None = None,
) -> Tensor:
    """Attention output for ``variant`` before the residual connection.

    For ``BOTH`` the head weights act first and the channel gate is
    computed from (X, Y^H) and applied to Y^H.
    """
    variant = BlockVariant.parse(variant)
    if variant.horizontal and params.horizontal is None:
        raise ConfigError(f"{variant.value} block needs horizontal parameters")
    if variant.vertical and params.vertical is None:
        raise ConfigError(f"{variant.value} block needs vertical parameters")
    pool = _default_pool(x, pool)
    record = {} if trace is not None else None
    with section("sdpa"):
        heads, attn = head_outputs(x, params, memory, mask)
    if variant.horizontal:
        sub: list = []
        y = _horizontal_from_heads(x, heads, params, pool, sub if record is not None else None)
        if record is not None:
            record.update(sub[0])
    else:
        with section("sdpa"):
            y = ops.matmul(merge_heads(heads), params.w_o)
    if variant.vertical:
        sub = []
        y = vertical_attend(x, y, params, pool, sub if record is not None else None)
        if record is not None:
            record.update(sub[0])
    if record is not None:
        record["attn"] = attn.data.copy()
        trace.append(record)
    return y


def feed_forward(x: Tensor, p: FFNParams) -> Tensor:
    with section("ffn"):
        h = ops.relu(ops.add(ops.matmul(x, p.w1), p.b1))
        return ops.add(ops.matmul(h, p.w2), p.b2)


def add_norm(x: Tensor, sub: Tensor, p: LayerNormParams, dropout: float = 0.0, rng=None) -> Tensor:
    """LayerNorm(dropout(sub) + x)."""
    sub = ops.dropout(sub, dropout, rng)
    with section("residual_norm"):
        return ops.layer_norm(ops.add(sub, x), p.gain, p.bias)


def block_forward(
    x: Tensor,
    variant: BlockVariant,
    params: BlockParams,
    mask=None,
    pool=None,
    trace: list | None = None,
    dropout: float = 0.0,
    rng=None,
) -> Tensor:
    """Self-attention sublayer (with the variant's augmentation) then FFN, each with residual + layer norm."""
    inner = attention_sublayer(x, variant, params.attn, mask=mask, pool=pool, trace=trace)
    h = add_norm(x, inner, params.attn_norm, dropout, rng)
    return add_norm(h, feed_forward(h, params.ffn), params.ffn_norm, dropout, rng)

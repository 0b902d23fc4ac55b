"""Encoder-decoder Transformer assembled from attention blocks of one variant."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionParams,
    BlockParams,
    FFNParams,
    LayerNormParams,
    ParamSpec,
    add_norm,
    attention_param_specs,
    attention_sublayer,
    block_forward,
    block_param_specs,
    causal_mask,
    causal_pool,
    feed_forward,
    ffn_specs,
    key_padding_mask,
    layer_norm_specs,
    materialize,
    mean_pool,
)
from .autodiff import Tensor, no_grad, ops
from .config import ConfigError, ModelConfig

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2


class InputError(ValueError):
    """Token ids or sequence lengths outside what the model accepts."""


def positional_encoding(max_len: int, d: int) -> np.ndarray:
    """Sinusoidal table: PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(same)."""
    if d % 2:
        raise ConfigError(f"d_model: sinusoidal positions need an even width, got {d}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((max_len, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def model_param_specs(cfg: ModelConfig) -> list[ParamSpec]:
    """Ordered parameter list; the order is the checkpoint and counting order."""
    att, var, D = cfg.attention, cfg.variant, cfg.d_model
    specs = [ParamSpec("embed.token", (cfg.vocab_size, D), "uniform", D)]
    for i in range(cfg.num_encoder_blocks):
        specs += block_param_specs(att, var, cfg.ffn_width, f"encoder.{i}.")
    for i in range(cfg.num_decoder_blocks):
        p = f"decoder.{i}."
        specs += attention_param_specs(att, var, p + "self_attn.")
        specs += layer_norm_specs(D, p + "self_norm.")
        specs += attention_param_specs(att, var, p + "cross_attn.")
        specs += layer_norm_specs(D, p + "cross_norm.")
        specs += ffn_specs(D, cfg.ffn_width, p + "ffn.")
        specs += layer_norm_specs(D, p + "ffn_norm.")
    # Zero output weights make the untrained predictive distribution exactly uniform.
    specs += [ParamSpec("output.weight", (D, cfg.vocab_size), "zeros"), ParamSpec("output.bias", (cfg.vocab_size,), "zeros")]
    return specs


@dataclass
class DecoderBlockParams:
    self_attn: AttentionParams
    self_norm: LayerNormParams
    cross_attn: AttentionParams
    cross_norm: LayerNormParams
    ffn: FFNParams
    ffn_norm: LayerNormParams

    @classmethod
    def from_named(cls, p: dict[str, Tensor], prefix: str) -> DecoderBlockParams:
        def ln(q):
            return LayerNormParams(p[q + "gain"], p[q + "bias"])

        return cls(
            AttentionParams.from_named(p, prefix + "self_attn."),
            ln(prefix + "self_norm."),
            AttentionParams.from_named(p, prefix + "cross_attn."),
            ln(prefix + "cross_norm."),
            FFNParams(*(p[prefix + "ffn." + k] for k in ("w1", "b1", "w2", "b2"))),
            ln(prefix + "ffn_norm."),
        )


class Seq2SeqModel:
    """Token embedding + sinusoidal positions, encoder stack, causal decoder stack, vocab head.

    Parameters live in ``self.params`` (ordered by :func:`model_param_specs`);
    the block structures reference the same tensors.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = [s.name for s in model_param_specs(config)]
        if list(params) != expected:
            missing = sorted(set(expected) - set(params))
            raise ConfigError(f"parameter set does not match config (missing: {missing[:5]})")
        self.config = config
        self.params = params
        self.pe = positional_encoding(config.max_len, config.d_model).astype(config.dtype)
        self.encoder = [BlockParams.from_named(params, f"encoder.{i}.") for i in range(config.num_encoder_blocks)]
        self.decoder = [DecoderBlockParams.from_named(params, f"decoder.{i}.") for i in range(config.num_decoder_blocks)]
        self.training = False
        self.dropout_rng: np.random.Generator | None = None

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def train(self, seed: int | None = None) -> Seq2SeqModel:
        self.training = True
        if self.config.dropout > 0 and self.dropout_rng is None:
            self.dropout_rng = np.random.default_rng(self.config.seed if seed is None else seed)
        return self

    def eval(self) -> Seq2SeqModel:
        self.training = False
        return self

    @property
    def _drop(self) -> float:
        return self.config.dropout if self.training else 0.0

    def _check_ids(self, ids: np.ndarray, what: str) -> None:
        if ids.ndim != 2:
            raise InputError(f"{what}: expected a [batch, length] id array, got shape {ids.shape}")
        if ids.shape[1] > self.config.max_len:
            raise InputError(f"{what}: length {ids.shape[1]} exceeds max_len {self.config.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise InputError(f"{what}: token id outside [0, {self.config.vocab_size})")

    def _embed(self, ids: np.ndarray) -> Tensor:
        cfg = self.config
        e = ops.embedding(self.params["embed.token"], ids)
        x = ops.add(ops.mul(e, math.sqrt(cfg.d_model)), self.pe[: ids.shape[1]])
        return ops.dropout(x, self._drop, self.dropout_rng)

    def encode(self, src: np.ndarray, trace: list | None = None) -> Tensor:
        src = np.asarray(src)
        self._check_ids(src, "src")
        valid = src != PAD_ID
        mask = key_padding_mask(valid, self.config.dtype)
        pool = mean_pool(src.shape[1], valid, self.config.dtype)
        x = self._embed(src)
        for i, blk in enumerate(self.encoder):
            sub = [] if trace is not None else None
            x = block_forward(x, self.config.variant, blk, mask, pool, sub, self._drop, self.dropout_rng)
            if trace is not None:
                trace.append({"block": f"encoder.{i}.attn", **sub[0]})
        return x

    def decode(self, tgt_in: np.ndarray, memory: Tensor, src: np.ndarray, trace: list | None = None) -> Tensor:
        """Vocabulary logits ``[B, T, V]`` for decoder inputs ``tgt_in`` (teacher forcing)."""
        cfg = self.config
        tgt_in = np.asarray(tgt_in)
        self._check_ids(tgt_in, "tgt")
        T = tgt_in.shape[1]
        valid = tgt_in != PAD_ID
        self_mask = causal_mask(T, cfg.dtype)[None, None] + key_padding_mask(valid, cfg.dtype)
        pool = causal_pool(T, valid, cfg.dtype)
        cross_mask = key_padding_mask(np.asarray(src) != PAD_ID, cfg.dtype)
        y = self._embed(tgt_in)
        drop, rng = self._drop, self.dropout_rng
        for i, blk in enumerate(self.decoder):
            sub = [] if trace is not None else None
            a = attention_sublayer(y, cfg.variant, blk.self_attn, mask=self_mask, pool=pool, trace=sub)
            y = add_norm(y, a, blk.self_norm, drop, rng)
            c = attention_sublayer(y, cfg.variant, blk.cross_attn, memory=memory, mask=cross_mask, pool=pool, trace=sub)
            y = add_norm(y, c, blk.cross_norm, drop, rng)
            y = add_norm(y, feed_forward(y, blk.ffn), blk.ffn_norm, drop, rng)
            if trace is not None:
                trace.append({"block": f"decoder.{i}.self_attn", **sub[0]})
                trace.append({"block": f"decoder.{i}.cross_attn", **sub[1]})
        return ops.add(ops.matmul(y, self.params["output.weight"]), self.params["output.bias"])

    def forward_batch(self, src: np.ndarray, tgt_in: np.ndarray, trace: list | None = None) -> Tensor:
        memory = self.encode(src, trace)
        return self.decode(tgt_in, memory, src, trace)

    __call__ = forward_batch


def build(config: ModelConfig) -> Seq2SeqModel:
    """Deterministically initialized model for ``config`` (seeded by ``config.seed``)."""
    rng = np.random.default_rng(config.seed)
    return Seq2SeqModel(config, materialize(model_param_specs(config), rng, config.dtype))


def forward(model: Seq2SeqModel, src_tokens: Sequence[int], tgt_tokens: Sequence[int]) -> Tensor:
    """Logits ``[len(tgt), vocab]`` for one pair; ``tgt_tokens`` is the decoder input."""
    src = np.asarray(src_tokens, dtype=np.int64)[None]
    tgt = np.asarray(tgt_tokens, dtype=np.int64)[None]
    logits = model.forward_batch(src, tgt)
    return ops.reshape(logits, logits.shape[1:])


def greedy_decode_batch(
    model: Seq2SeqModel, src: np.ndarray, max_steps: int, bos_id: int = BOS_ID, eos_id: int = EOS_ID
) -> list[list[int]]:
    """Greedy decoding of a padded source batch; argmax ties go to the lowest id."""
    src = np.asarray(src, dtype=np.int64)
    B = src.shape[0]
    if max_steps > model.config.max_len:
        raise InputError(f"max_steps {max_steps} exceeds max_len {model.config.max_len}")
    out: list[list[int]] = [[] for _ in range(B)]
    if max_steps <= 0 or B == 0:
        return out
    done = np.zeros(B, dtype=bool)
    tgt = np.full((B, 1), bos_id, dtype=np.int64)
    with no_grad():
        memory = model.encode(src)
        for _ in range(max_steps):
            logits = model.decode(tgt, memory, src).data[:, -1, :]
            nxt = np.argmax(logits, axis=-1)
            for b in np.flatnonzero(~done):
                if nxt[b] == eos_id:
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]))
            if done.all() or tgt.shape[1] >= model.config.max_len:
                break
            tgt = np.concatenate([tgt, np.where(done, PAD_ID, nxt)[:, None]], axis=1)
    return out


def greedy_decode(
    model: Seq2SeqModel, src_tokens: Sequence[int], max_steps: int, bos_id: int = BOS_ID, eos_id: int = EOS_ID
) -> list[int]:
    return greedy_decode_batch(model, np.asarray(src_tokens, dtype=np.int64)[None], max_steps, bos_id, eos_id)[0]

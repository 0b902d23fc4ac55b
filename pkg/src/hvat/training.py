"""Label-smoothed cross-entropy, AdamW and a deterministic seq2seq training loop."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward, no_grad, ops
from .config import TASKS, ConfigError, TrainConfig
from .model import BOS_ID, EOS_ID, PAD_ID, Seq2SeqModel, greedy_decode_batch

logger = logging.getLogger(__name__)

Pair = tuple[list[int], list[int]]


class DivergenceError(FloatingPointError):
    """Training loss became NaN or infinite."""


# Loss and metrics


def smoothed_targets(targets: np.ndarray, vocab: int, eps: float, dtype) -> np.ndarray:
    q = np.full(targets.shape + (vocab,), eps / vocab)
    np.put_along_axis(q, targets[..., None], 1.0 - eps + eps / vocab, axis=-1)
    return q.astype(dtype)


def label_smoothed_ce(logits: Tensor, targets, eps: float = 0.1, pad_id: int = PAD_ID) -> Tensor:
    """Mean over non-pad positions of -sum_v q_v log softmax(logits)_v.

    ``q = (1 - eps) * one_hot(target) + eps / V``.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ops.ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    keep = targets != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("label_smoothed_ce: every target is padding")
    V = logits.shape[-1]
    logp = ops.log_softmax(logits, axis=-1)
    q = smoothed_targets(np.where(keep, targets, 0), V, eps, logits.dtype)
    per_token = ops.sum(ops.mul(logp, q), axis=-1)
    weights = (keep / n).astype(logits.dtype)
    return ops.neg(ops.sum(ops.mul(per_token, weights)))


def perplexity(mean_nll: float) -> float:
    return math.exp(mean_nll)


def token_log_probs(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """log p(target) per position, computed in float64."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]


# Optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, p: np.ndarray) -> AdamState:
        return cls(np.zeros_like(p), np.zeros_like(p))


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> np.ndarray:
    """One in-place AdamW update with bias correction and decoupled decay."""
    if param.shape != grad.shape:
        raise ValueError(f"adamw_step: param {param.shape} and grad {grad.shape} differ")
    b1, b2 = betas
    state.step += 1
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    if weight_decay:
        param *= 1 - lr * weight_decay
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


def adam_step(param, grad, state: AdamState, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """Classic Adam with L2 penalty folded into the gradient."""
    g = grad + weight_decay * param if weight_decay else grad
    b1, b2 = betas
    state.step += 1
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * g * g
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class AdamW:
    def __init__(self, params: Iterable[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.state = [AdamState.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, st in zip(self.params, self.state):
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad.astype(p.dtype, copy=False), st, self.lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# Synthetic tasks


def generate_task(task: str, seed: int, count: int, seq_len_range: tuple[int, int], vocab_size: int) -> list[Pair]:
    """Random (src, tgt) pairs; payload ids drawn uniformly from [3, vocab_size)."""
    if task not in TASKS:
        raise ConfigError(f"task must be one of {', '.join(TASKS)}, got {task!r}")
    lo, hi = seq_len_range
    if not 1 <= lo <= hi:
        raise ConfigError(f"seq_len range ({lo}, {hi}) is invalid")
    if vocab_size <= 3:
        raise ConfigError("vocab_size must exceed the 3 reserved ids")
    if count < 0:
        raise ConfigError("count must be >= 0")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        src = [int(t) for t in rng.integers(3, vocab_size, size=n)]
        if task == "copy":
            tgt = list(src)
        elif task == "reverse":
            tgt = src[::-1]
        else:
            tgt = sorted(src)
        pairs.append((src, tgt))
    return pairs


@dataclass
class Batch:
    src: np.ndarray  # [B, S]
    tgt_in: np.ndarray  # [B, T+1], starts with BOS
    tgt_out: np.ndarray  # [B, T+1], ends with EOS
    pairs: list[Pair]


def make_batch(pairs: Sequence[Pair]) -> Batch:
    """Pad to the longest sequence in the batch."""
    B = len(pairs)
    S = max(len(s) for s, _ in pairs)
    T = max(len(t) for _, t in pairs) + 1
    src = np.full((B, S), PAD_ID, dtype=np.int64)
    tin = np.full((B, T), PAD_ID, dtype=np.int64)
    tout = np.full((B, T), PAD_ID, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = s
        tin[i, : len(t) + 1] = [BOS_ID, *t]
        tout[i, : len(t) + 1] = [*t, EOS_ID]
    return Batch(src, tin, tout, list(pairs))


def iter_batches(pairs: Sequence[Pair], batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(len(pairs)) if order is None else order
    for start in range(0, len(idx), batch_size):
        yield make_batch([pairs[i] for i in idx[start : start + batch_size]])


# Training loop


@dataclass
class MetricsRow:
    epoch: int
    step: int
    split: str
    loss: float
    token_accuracy: float
    ppl: float

    HEADER = ("epoch", "step", "split", "loss", "token_accuracy", "ppl")

    def as_csv_fields(self) -> list[str]:
        return [str(self.epoch), str(self.step), self.split, repr(self.loss), repr(self.token_accuracy), repr(self.ppl)]



def greedy_token_accuracy(model: Seq2SeqModel, batch: Batch) -> tuple[int, int]:
    """(correct, total) over target tokens including EOS, position by position."""
    max_steps = batch.tgt_out.shape[1]
    decoded = greedy_decode_batch(model, batch.src, max_steps)
    correct = total = 0
    for out, (_, tgt) in zip(decoded, batch.pairs):
        ref = [*tgt, EOS_ID]
        hyp = [*out, EOS_ID] if len(out) < max_steps else list(out)
        total += len(ref)
        correct += sum(1 for a, b in zip(ref, hyp) if a == b)
    return correct, total


def evaluate(model: Seq2SeqModel, pairs: Sequence[Pair], cfg: TrainConfig, epoch: int = 0, step: int = 0) -> MetricsRow:
    """Validation metrics: smoothed loss, greedy-decoding token accuracy, unsmoothed perplexity."""
    model.eval()
    loss_sum = nll_sum = 0.0
    n_tok = correct = total = 0
    with no_grad():
        for batch in iter_batches(pairs, cfg.batch_size):
            logits = model(batch.src, batch.tgt_in)
            keep = batch.tgt_out != PAD_ID
            n = int(keep.sum())
            loss_sum += float(label_smoothed_ce(logits, batch.tgt_out, cfg.label_smoothing).data) * n
            nll_sum += float(-token_log_probs(logits.data, batch.tgt_out)[keep].sum())
            n_tok += n
            c, t = greedy_token_accuracy(model, batch)
            correct += c
            total += t
    mean_nll = nll_sum / n_tok
    return MetricsRow(epoch, step, "val", loss_sum / n_tok, correct / total, perplexity(mean_nll))


def train(
    model: Seq2SeqModel,
    cfg: TrainConfig,
    data: tuple[Sequence[Pair], Sequence[Pair]],
    on_row: Callable[[MetricsRow], None] | None = None,
) -> tuple[Seq2SeqModel, list[MetricsRow]]:
    """Mini-batch AdamW with teacher forcing; one train and one val row per epoch.

    Train rows report teacher-forced accuracy; val rows report greedy-decoding
    accuracy (see :func:`evaluate`).
    The first row is a validation pass of the untrained model (epoch 0).
    Raises :class:`DivergenceError` on a non-finite loss.
    """
    train_pairs, val_pairs = data
    if not train_pairs or not val_pairs:
        raise ValueError("train and validation data must be nonempty")
    if max(max(len(s), len(t) + 1) for s, t in [*train_pairs, *val_pairs]) > model.config.max_len:
        raise ValueError("a sequence is longer than the model's max_len")
    rows: list[MetricsRow] = []

    def emit(row):
        rows.append(row)
        if on_row is not None:
            on_row(row)

    emit(evaluate(model, val_pairs, cfg))
    opt = AdamW(model.parameters(), cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train(cfg.seed)
        order = rng.permutation(len(train_pairs))
        loss_sum = nll_sum = 0.0
        n_tok = n_correct = 0
        for batch in iter_batches(train_pairs, cfg.batch_size, order):
            logits = model(batch.src, batch.tgt_in)
            loss = label_smoothed_ce(logits, batch.tgt_out, cfg.label_smoothing)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {step + 1}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            step += 1
            keep = batch.tgt_out != PAD_ID
            n = int(keep.sum())
            loss_sum += value * n
            nll_sum += float(-token_log_probs(logits.data, batch.tgt_out)[keep].sum())
            n_correct += int((logits.data.argmax(axis=-1) == batch.tgt_out)[keep].sum())
            n_tok += n
        emit(MetricsRow(epoch, step, "train", loss_sum / n_tok, n_correct / n_tok, perplexity(nll_sum / n_tok)))
        val = evaluate(model, val_pairs, cfg, epoch, step)
        emit(val)
        logger.info("epoch %d step %d val loss %.4f acc %.4f ppl %.4f", epoch, step, val.loss, val.token_accuracy, val.ppl)
    model.eval()
    return model, rows


def task_data(cfg: TrainConfig, vocab_size: int) -> tuple[list[Pair], list[Pair]]:
    """Training and validation pairs for ``cfg`` (distinct seeds)."""
    rng = (cfg.seq_len_min, cfg.seq_len_max)
    return (
        generate_task(cfg.task, cfg.seed, cfg.train_count, rng, vocab_size),
        generate_task(cfg.task, cfg.val_seed, cfg.val_count, rng, vocab_size),
    )


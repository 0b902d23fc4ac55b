import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hvat.autodiff import Tensor, grad_check
from hvat.config import ConfigError, ModelConfig, TrainConfig
from hvat.model import EOS_ID, build
from hvat.training import (
    AdamState,
    DivergenceError,
    MetricsRow,
    adam_step,
    adamw_step,
    evaluate,
    generate_task,
    label_smoothed_ce,
    make_batch,
    perplexity,
    task_data,
    token_log_probs,
    train,
)

TINY = dict(vocab_size=10, d_model=16, n_heads=2, d_k=8, d_v=8, num_encoder_blocks=1, num_decoder_blocks=1, max_len=8)


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


# loss


def test_no_smoothing_is_cross_entropy():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 5, 7))
    targets = rng.integers(3, 7, size=(2, 5))
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    direct = -np.mean(np.log(np.take_along_axis(p, targets[..., None], -1)))
    assert float(label_smoothed_ce(t(logits), targets, 0.0).data) == pytest.approx(direct, rel=1e-13)


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5, 0.9])
def test_uniform_logits_give_log_v(eps):
    loss = label_smoothed_ce(t(np.zeros((3, 11))), np.array([3, 4, 5]), eps)
    assert float(loss.data) == pytest.approx(math.log(11), rel=1e-14)


def test_two_class_oracle():
    loss = float(label_smoothed_ce(t([[2.0, 0.0]]), np.array([0]), 0.2, pad_id=-1).data)
    lsm0 = 2.0 - math.log(math.exp(2.0) + 1.0)
    expect = -(0.9 * lsm0 + 0.1 * (lsm0 - 2.0))
    assert loss == pytest.approx(expect, rel=1e-14)
    assert loss == pytest.approx(0.32693, abs=5e-6)


def test_padding_excluded():
    logits = np.random.default_rng(1).normal(size=(1, 4, 6))
    full = float(label_smoothed_ce(t(logits[:, :2]), np.array([[3, 4]])).data)
    padded = float(label_smoothed_ce(t(logits), np.array([[3, 4, 0, 0]])).data)
    assert padded == pytest.approx(full, rel=1e-14)


def test_all_padding_is_an_error():
    with pytest.raises(ValueError):
        label_smoothed_ce(t(np.zeros((2, 5))), np.array([0, 0]))


def test_loss_gradient():
    rng = np.random.default_rng(2)
    targets = np.array([[3, 4, 0], [5, 1, 2]])
    assert grad_check(lambda x: label_smoothed_ce(x, targets, 0.1), t(rng.normal(size=(2, 3, 6)))) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 0.99))
def test_smoothed_loss_bounds_nll(seed, eps):
    # -sum q log p >= (1-eps) * NLL since every log p <= 0
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=3, size=(4, 9))
    targets = rng.integers(3, 9, size=4)
    nll = -token_log_probs(logits, targets).mean()
    loss = float(label_smoothed_ce(t(logits), targets, eps).data)
    assert loss >= (1 - eps) * nll - 1e-12


# perplexity


def test_perplexity_examples():
    assert perplexity(math.log(10)) == pytest.approx(10.0)
    assert perplexity(0.0) == 1.0
    assert perplexity(1.0) == pytest.approx(2.71828, abs=5e-6)


# optimizer


def test_adamw_zero_grad_no_decay():
    p = np.array([1.0, -2.0])
    adamw_step(p, np.zeros(2), AdamState.zeros_like(p), weight_decay=0.0)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adamw_pure_decay():
    p = np.array([1.0, -2.0, 3.5])
    expect = p * (1 - 1e-3 * 0.1)
    adamw_step(p, np.zeros(3), AdamState.zeros_like(p), lr=1e-3, weight_decay=0.1)
    np.testing.assert_array_equal(p, expect)


def test_adamw_first_step_magnitude():
    p = np.zeros(1)
    adamw_step(p, np.ones(1), AdamState.zeros_like(p), lr=1e-3, weight_decay=0.01)
    assert p[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adamw_shape_mismatch():
    p = np.zeros(3)
    with pytest.raises(ValueError):
        adamw_step(p, np.zeros(2), AdamState.zeros_like(p))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_adamw_without_decay_equals_adam(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=5)
    b = a.copy()
    sa, sb = AdamState.zeros_like(a), AdamState.zeros_like(b)
    for _ in range(20):
        g = rng.normal(size=5)
        adamw_step(a, g, sa, weight_decay=0.0)
        adam_step(b, g, sb)
        assert a.tobytes() == b.tobytes()


def test_decoupled_decay_differs_from_l2():
    a = np.array([2.0])
    b = a.copy()
    sa, sb = AdamState.zeros_like(a), AdamState.zeros_like(b)
    for g in (0.1, -0.3, 0.2):
        adamw_step(a, np.array([g]), sa, lr=0.01, weight_decay=0.5)
        adam_step(b, np.array([g]), sb, lr=0.01, weight_decay=0.5)
    assert a[0] != b[0]


# tasks and batches


@pytest.mark.parametrize("task,tgt", [("copy", [5, 7, 4]), ("reverse", [4, 7, 5]), ("sort", [4, 5, 7])])
def test_task_targets(task, tgt):
    for src, out in generate_task(task, 0, 50, (3, 3), 10):
        if src == [5, 7, 4]:
            assert out == tgt
    # the transformation itself, on every generated pair
    for src, out in generate_task(task, 1, 20, (1, 6), 10):
        assert out == {"copy": src, "reverse": src[::-1], "sort": sorted(src)}[task]


def test_tasks_deterministic_and_in_range():
    a = generate_task("copy", 7, 30, (3, 8), 20)
    assert a == generate_task("copy", 7, 30, (3, 8), 20)
    assert a != generate_task("copy", 8, 30, (3, 8), 20)
    for src, _ in a:
        assert 3 <= len(src) <= 8 and all(3 <= x < 20 for x in src)


def test_task_validation():
    with pytest.raises(ConfigError):
        generate_task("copy", 0, 5, (4, 2), 10)
    with pytest.raises(ConfigError):
        generate_task("copy", 0, 5, (1, 2), 3)
    with pytest.raises(ConfigError):
        generate_task("shuffle", 0, 5, (1, 2), 10)


def test_make_batch_layout():
    b = make_batch([([3, 4], [3, 4]), ([5], [5])])
    np.testing.assert_array_equal(b.src, [[3, 4], [5, 0]])
    np.testing.assert_array_equal(b.tgt_in, [[1, 3, 4], [1, 5, 0]])
    np.testing.assert_array_equal(b.tgt_out, [[3, 4, EOS_ID], [5, EOS_ID, 0]])


# training loop


def _setup(epochs, variant="baseline", **train_kw):
    cfg = TrainConfig(epochs=epochs, train_count=48, val_count=12, seq_len_max=5, batch_size=16, **train_kw)
    model = build(ModelConfig(**TINY, variant=variant))
    return model, cfg, task_data(cfg, 10)


def test_zero_epochs_leaves_model_untouched():
    model, cfg, data = _setup(0)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    _, rows = train(model, cfg, data)
    assert len(rows) == 1 and rows[0].split == "val" and rows[0].epoch == 0
    for n, p in model.named_parameters():
        assert p.data.tobytes() == before[n].tobytes()


def test_training_is_deterministic():
    streams = []
    for _ in range(2):
        model, cfg, data = _setup(2, "both")
        streams.append([r.as_csv_fields() for r in train(model, cfg, data)[1]])
    assert streams[0] == streams[1]
    assert [r[2] for r in streams[0]] == ["val", "train", "val", "train", "val"]


def test_untrained_metrics():
    model, cfg, data = _setup(0)
    row = evaluate(model, data[1], cfg)
    assert row.ppl == pytest.approx(10.0, rel=1e-6)
    assert row.loss == pytest.approx(math.log(10), rel=1e-6)


def test_divergence_guard():
    model, cfg, data = _setup(1)
    model.params["output.bias"].data[3] = np.nan
    with pytest.raises(DivergenceError):
        train(model, cfg, data)


def test_loss_decreases():
    model, cfg, data = _setup(3, "vertical", lr=3e-3)
    _, rows = train(model, cfg, data)
    val = [r for r in rows if r.split == "val"]
    assert val[-1].loss < val[0].loss


def test_metrics_row_csv_is_locale_independent():
    row = MetricsRow(3, 120, "val", 0.5, 0.99, 1.0001)
    assert row.as_csv_fields() == ["3", "120", "val", "0.5", "0.99", "1.0001"]
    assert MetricsRow.HEADER == ("epoch", "step", "split", "loss", "token_accuracy", "ppl")


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(label_smoothing=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)

import math

import numpy as np
import pytest

from hvat.analysis import count_params
from hvat.autodiff import Tensor, no_grad
from hvat.config import ConfigError, ModelConfig
from hvat.model import (
    PAD_ID,
    InputError,
    Seq2SeqModel,
    build,
    forward,
    greedy_decode,
    greedy_decode_batch,
    model_param_specs,
    positional_encoding,
)

SMALL = dict(vocab_size=12, d_model=16, n_heads=4, d_k=4, d_v=4, num_encoder_blocks=2, num_decoder_blocks=2, max_len=10)


def randomized(cfg, seed=0):
    """Model with every parameter (gates and output head included) drawn at random."""
    model = build(cfg)
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data = rng.normal(scale=0.3, size=p.shape).astype(p.dtype)
    return model


# positional encoding


def test_positions_at_zero():
    pe = positional_encoding(6, 8)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)


def test_positions_bounded():
    pe = positional_encoding(64, 32)
    assert pe.min() >= -1 and pe.max() <= 1


def test_positions_scalar():
    assert positional_encoding(2, 4)[1, 0] == pytest.approx(math.sin(1.0), abs=1e-15)
    assert positional_encoding(2, 4)[1, 0] == pytest.approx(0.84147, abs=5e-6)


def test_positions_odd_width():
    with pytest.raises(ConfigError):
        positional_encoding(4, 7)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=7, d_k=2, d_v=2, n_heads=1)


# build


def test_build_is_deterministic():
    a, b = build(ModelConfig(**SMALL, variant="both")), build(ModelConfig(**SMALL, variant="both"))
    assert [n for n, _ in a.named_parameters()] == [n for n, _ in b.named_parameters()]
    for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes()


def test_different_seed_differs():
    a = build(ModelConfig(**SMALL, seed=0))
    b = build(ModelConfig(**SMALL, seed=1))
    assert not np.array_equal(a.params["embed.token"].data, b.params["embed.token"].data)


def test_baseline_has_no_augmentation_params():
    names = [n for n, _ in build(ModelConfig(**SMALL)).named_parameters()]
    assert not any(".hor." in n or ".ver." in n for n in names)
    names = [n for n, _ in build(ModelConfig(**SMALL, variant="both")).named_parameters()]
    assert any(".hor." in n for n in names) and any(".ver." in n for n in names)


def test_gates_start_at_zero():
    model = build(ModelConfig(**SMALL, variant="both"))
    for name, p in model.named_parameters():
        if name.rsplit(".", 1)[-1] in ("w_b", "b_b", "w_u", "b_u"):
            assert not np.any(p.data), name


def test_default_attention_params_per_layer():
    report = count_params(ModelConfig())
    assert report.per_layer["multi_head"] == 786_432 + 262_144 == 1_048_576


def test_parameter_mismatch_rejected():
    cfg = ModelConfig(**SMALL, variant="vertical")
    params = dict(build(ModelConfig(**SMALL)).params)
    with pytest.raises(ConfigError):
        Seq2SeqModel(cfg, params)


def test_invalid_config_names_field():
    with pytest.raises(ConfigError, match="vocab_size"):
        ModelConfig(vocab_size=1)
    with pytest.raises(ConfigError, match="num_encoder_blocks"):
        ModelConfig(num_encoder_blocks=0, num_decoder_blocks=0)
    with pytest.raises(ConfigError, match="d_a"):
        ModelConfig(d_model=8, d_a=8, d_k=2, d_v=2)


# forward


@pytest.mark.parametrize("variant", ["baseline", "horizontal", "vertical", "both"])
def test_forward_shape(variant):
    model = build(ModelConfig(**SMALL, variant=variant))
    logits = forward(model, [3, 4, 5, 6], [1, 7, 8])
    assert logits.shape == (3, 12)


def test_untrained_model_is_uniform():
    model = build(ModelConfig(**SMALL, variant="both"))
    with no_grad():
        logits = forward(model, [3, 4, 5], [1, 3, 4]).data
    assert np.all(logits == 0)


def test_out_of_range_token():
    model = build(ModelConfig(**SMALL))
    with pytest.raises(InputError):
        forward(model, [3, 12], [1])
    with pytest.raises(InputError):
        forward(model, [3, -1], [1])


def test_overlong_sequence():
    model = build(ModelConfig(**SMALL))
    with pytest.raises(InputError):
        forward(model, [3] * 11, [1])


@pytest.mark.parametrize("variant", ["baseline", "horizontal", "vertical", "both"])
def test_decoder_causality(variant):
    model = randomized(ModelConfig(**SMALL, variant=variant, dtype="float64"))
    tgt = [1, 5, 6, 7, 8, 9]
    base = forward(model, [3, 4, 5], tgt).data
    for j in range(1, len(tgt)):
        changed = list(tgt)
        changed[j] = 3 if tgt[j] != 3 else 4
        out = forward(model, [3, 4, 5], changed).data
        assert out[:j].tobytes() == base[:j].tobytes(), j
        assert not np.array_equal(out[j:], base[j:])


@pytest.mark.parametrize("variant", ["baseline", "horizontal", "vertical", "both"])
def test_source_change_reaches_every_position(variant):
    model = randomized(ModelConfig(**SMALL, variant=variant, dtype="float64"), seed=1)
    a = forward(model, [3, 4, 5, 6], [1, 5, 6, 7]).data
    b = forward(model, [3, 4, 9, 6], [1, 5, 6, 7]).data
    assert np.all(np.any(a != b, axis=-1))


def test_batch_padding_matches_single():
    model = randomized(ModelConfig(**SMALL, variant="both", dtype="float64"), seed=2)
    src = np.array([[3, 4, 5, 6], [7, 8, PAD_ID, PAD_ID]])
    tgt = np.array([[1, 3, 4, 5], [1, 9, PAD_ID, PAD_ID]])
    batch = model(src, tgt).data
    single = forward(model, [7, 8], [1, 9]).data
    np.testing.assert_allclose(batch[1, :2], single, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("m", [1, 2, 4])
def test_horizontal_zero_init_equals_scaled_baseline(m):
    kw = dict(SMALL, n_heads=m, d_k=16 // m, d_v=16 // m, dtype="float64")
    hor = build(ModelConfig(**kw, variant="horizontal"))
    rng = np.random.default_rng(3)
    hor.params["output.weight"].data = rng.normal(size=hor.params["output.weight"].shape)
    base_params = {}
    for name, p in hor.named_parameters():
        if ".hor." in name:
            continue
        data = p.data.copy()
        if name.endswith("attn.w_v"):
            data = data / m
        base_params[name] = Tensor(data, requires_grad=True)
    base = Seq2SeqModel(ModelConfig(**kw, variant="baseline"), base_params)
    a = forward(hor, [3, 4, 5, 6], [1, 7, 8]).data
    b = forward(base, [3, 4, 5, 6], [1, 7, 8]).data
    assert a.tobytes() == b.tobytes()


# greedy decoding


def test_greedy_zero_steps():
    model = build(ModelConfig(**SMALL))
    assert greedy_decode(model, [3, 4], 0) == []


def test_greedy_ties_pick_lowest_id():
    model = build(ModelConfig(**SMALL))  # zero output head: every logit ties
    assert greedy_decode(model, [3, 4], 4) == [0, 0, 0, 0]


def test_greedy_deterministic():
    model = randomized(ModelConfig(**SMALL, variant="both"), seed=4)
    assert greedy_decode(model, [3, 4, 5], 6) == greedy_decode(model, [3, 4, 5], 6)


def test_greedy_batch_matches_single():
    model = randomized(ModelConfig(**SMALL, variant="vertical", dtype="float64"), seed=5)
    src = np.array([[3, 4, 5], [6, 7, PAD_ID]])
    assert greedy_decode_batch(model, src, 5) == [greedy_decode(model, [3, 4, 5], 5), greedy_decode(model, [6, 7], 5)]


def test_greedy_respects_max_len():
    model = build(ModelConfig(**SMALL))
    with pytest.raises(InputError):
        greedy_decode(model, [3], 11)


def test_param_order_matches_specs():
    cfg = ModelConfig(**SMALL, variant="both")
    assert [n for n, _ in build(cfg).named_parameters()] == [s.name for s in model_param_specs(cfg)]

import json

import pytest

from hvat.config import BlockVariant, ConfigError, ModelConfig, RunConfig, TrainConfig


def test_defaults():
    m = ModelConfig()
    assert (m.d_model, m.n_heads, m.d_k, m.d_v, m.num_encoder_blocks, m.num_decoder_blocks) == (512, 8, 64, 64, 6, 6)
    assert m.d_a == 128 and m.ffn_width == 2048
    t = TrainConfig()
    assert (t.lr, t.betas, t.adam_eps, t.weight_decay, t.label_smoothing) == (1e-3, (0.9, 0.999), 1e-8, 0.01, 0.1)


def test_variant_parsing():
    assert BlockVariant.parse("Both") is BlockVariant.BOTH
    assert BlockVariant.BOTH.horizontal and BlockVariant.BOTH.vertical
    assert not BlockVariant.BASELINE.horizontal
    with pytest.raises(ConfigError):
        BlockVariant.parse("diagonal")


def test_round_trip_materializes_defaults():
    cfg = RunConfig.from_dict({"model": {"vocab_size": 20, "d_model": 64}, "train": {"epochs": 3}})
    data = json.loads(cfg.to_json())
    assert data["model"]["d_a"] == 16 and data["train"]["vocab_size"] == 20 and data["train"]["val_seed"] == 1
    assert data["io"]["checkpoint_path"].endswith("model.ckpt")
    assert RunConfig.from_dict(data) == cfg


@pytest.mark.parametrize(
    "doc",
    [
        {"model": {"widht": 3}},
        {"extra": {}},
        {"train": {"lr": "fast"}},
        {"train": {"epochs": 2.5}},
        {"model": {"variant": "sideways"}},
        {"model": {"vocab_size": 10}, "train": {"vocab_size": 12}},
        {"model": {"max_len": 5}, "train": {"seq_len_max": 8}},
        [],
    ],
)
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_with_seed_resets_val_seed():
    cfg = RunConfig().with_seed(7)
    assert cfg.model.seed == 7 and cfg.train.seed == 7 and cfg.train.val_seed == 8


def test_load_rejects_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(p)

"""Configuration objects and the JSON run-config schema."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration value, missing parameter set or unknown key."""


class BlockVariant(str, Enum):
    BASELINE = "baseline"
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"
    BOTH = "both"

    @property
    def horizontal(self) -> bool:
        return self in (BlockVariant.HORIZONTAL, BlockVariant.BOTH)

    @property
    def vertical(self) -> bool:
        return self in (BlockVariant.VERTICAL, BlockVariant.BOTH)

    @classmethod
    def parse(cls, value) -> BlockVariant:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise ConfigError(f"variant must be one of {choices}, got {value!r}") from None


def _require(cond: bool, field_name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{field_name}: {msg}")


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    d_k: int
    d_v: int
    d_a: int | None = None

    def __post_init__(self):
        if self.d_a is None:
            object.__setattr__(self, "d_a", max(1, self.d_model // 4))
        for name in ("d_model", "n_heads", "d_k", "d_v", "d_a"):
            _require(getattr(self, name) >= 1, name, "must be >= 1")
        _require(self.d_a < self.d_model, "d_a", f"squeeze width {self.d_a} must be < d_model {self.d_model}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults follow the WMT setup (512/8/64, 6+6 blocks)."""

    vocab_size: int = 32
    d_model: int = 512
    n_heads: int = 8
    d_k: int = 64
    d_v: int = 64
    d_a: int | None = None
    num_encoder_blocks: int = 6
    num_decoder_blocks: int = 6
    ffn_width: int | None = None
    max_len: int = 64
    variant: BlockVariant = BlockVariant.BASELINE
    seed: int = 0
    dropout: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "variant", BlockVariant.parse(self.variant))
        if self.ffn_width is None:
            object.__setattr__(self, "ffn_width", 4 * self.d_model)
        if self.d_a is None:
            object.__setattr__(self, "d_a", max(1, self.d_model // 4))
        _require(self.vocab_size >= 2, "vocab_size", "must be >= 2")
        _require(self.num_encoder_blocks >= 0, "num_encoder_blocks", "must be >= 0")
        _require(self.num_decoder_blocks >= 0, "num_decoder_blocks", "must be >= 0")
        _require(
            self.num_encoder_blocks + self.num_decoder_blocks >= 1,
            "num_encoder_blocks",
            "encoder + decoder blocks must be >= 1",
        )
        _require(self.max_len >= 1, "max_len", "must be >= 1")
        _require(self.ffn_width >= 1, "ffn_width", "must be >= 1")
        _require(self.d_model % 2 == 0, "d_model", "sinusoidal positions need an even width")
        _require(0.0 <= self.dropout < 1.0, "dropout", "must be in [0, 1)")
        _require(self.dtype in ("float32", "float64"), "dtype", "must be float32 or float64")
        self.attention  # validates the attention widths

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, self.d_k, self.d_v, self.d_a)

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return _from_dict(cls, d, "model")


TASKS = ("copy", "reverse", "sort")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    label_smoothing: float = 0.1
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    task: str = "copy"
    seq_len_min: int = 3
    seq_len_max: int = 8
    vocab_size: int | None = None
    train_count: int = 2000
    val_count: int = 200
    val_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.val_seed is None:
            object.__setattr__(self, "val_seed", self.seed + 1)
        _require(self.lr > 0, "lr", "must be > 0")
        _require(len(self.betas) == 2 and all(0 <= b < 1 for b in self.betas), "betas", "need two values in [0, 1)")
        _require(self.adam_eps > 0, "adam_eps", "must be > 0")
        _require(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        _require(0 <= self.label_smoothing < 1, "label_smoothing", "must be in [0, 1)")
        _require(self.batch_size >= 1, "batch_size", "must be >= 1")
        _require(self.epochs >= 0, "epochs", "must be >= 0")
        _require(self.task in TASKS, "task", f"must be one of {', '.join(TASKS)}")
        _require(1 <= self.seq_len_min <= self.seq_len_max, "seq_len_min", "need 1 <= seq_len_min <= seq_len_max")
        _require(self.vocab_size is None or self.vocab_size > 3, "vocab_size", "must be > 3 (ids 0-2 reserved)")
        _require(self.train_count >= 1, "train_count", "must be >= 1")
        _require(self.val_count >= 1, "val_count", "must be >= 1")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return _from_dict(cls, d, "train")


@dataclass(frozen=True)
class IOConfig:
    out_dir: str = "runs/default"
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.checkpoint_path is None:
            object.__setattr__(self, "checkpoint_path", str(Path(self.out_dir) / "model.ckpt"))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def __post_init__(self):
        tv = self.train.vocab_size
        if tv is None:
            object.__setattr__(self, "train", self.train.replace(vocab_size=self.model.vocab_size))
        elif tv != self.model.vocab_size:
            raise ConfigError(f"train.vocab_size: {tv} differs from model.vocab_size {self.model.vocab_size}")
        need = self.train.seq_len_max + 1
        if need > self.model.max_len:
            raise ConfigError(f"model.max_len: {self.model.max_len} is shorter than seq_len_max + 1 = {need}")

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "io": self.io.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed: int) -> RunConfig:
        return RunConfig(
            self.model.replace(seed=seed),
            self.train.replace(seed=seed, val_seed=None),
            self.io,
        )

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(d) - {"model", "train", "io"})
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        return cls(
            ModelConfig.from_dict(d.get("model", {})),
            TrainConfig.from_dict(d.get("train", {})),
            _from_dict(IOConfig, d.get("io", {}), "io"),
        )

    @classmethod
    def load(cls, path) -> RunConfig:
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)


def _check_type(value, tp, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return value
        inner = [a for a in args if a is not type(None)][0]
        return _check_type(value, inner, where)
    if tp is BlockVariant:
        return BlockVariant.parse(value)
    if tp is bool:
        ok = isinstance(value, bool)
    elif tp is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif tp is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif tp is str:
        ok = isinstance(value, str)
    elif origin is tuple:
        ok = isinstance(value, (list, tuple)) and all(isinstance(v, (int, float)) for v in value)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {getattr(tp, '__name__', tp)}, got {value!r}")
    return value


def _from_dict(cls, d, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s): {', '.join(unknown)}")
    kwargs = {k: _check_type(v, hints[k], f"{section}.{k}") for k, v in d.items()}
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{section}.{exc}") from None

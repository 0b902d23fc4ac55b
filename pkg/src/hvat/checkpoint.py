"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"HVAT"  u32 version
    u32 len + UTF-8 JSON model config (sorted keys)
    u32 entry count
    per entry: u32 name len + UTF-8 name, u32 rank, u64 dims[rank], float32 payload (row-major)
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import ConfigError, ModelConfig
from .model import Seq2SeqModel, model_param_specs

MAGIC = b"HVAT"
VERSION = 1


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoints."""


class TruncatedCheckpointError(CheckpointError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def encode(model: Seq2SeqModel) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg]
    params = model.named_parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, t in params:
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", t.data.ndim)]
        parts.append(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Seq2SeqModel, path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(model)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file ends inside {what} (offset {self.pos}, need {n} bytes)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf: bytes, config: ModelConfig | None = None) -> Seq2SeqModel:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {VERSION}")
    raw_cfg = r.take(r.u32("config length"), "config")
    try:
        stored = ModelConfig.from_dict(json.loads(raw_cfg.decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigMismatchError(f"config block is not valid JSON: {exc}") from None
    except ConfigError as exc:
        raise ConfigMismatchError(f"stored config does not validate: {exc}") from None
    cfg = stored if config is None else config
    if config is not None:
        for key in ("vocab_size", "d_model", "n_heads", "d_k", "d_v", "d_a", "ffn_width", "num_encoder_blocks", "num_decoder_blocks"):
            if getattr(stored, key) != getattr(config, key):
                raise ShapeMismatchError(f"{key}: checkpoint has {getattr(stored, key)}, config has {getattr(config, key)}")

    loaded: dict[str, np.ndarray] = {}
    for _ in range(r.u32("entry count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32(f"{name} rank")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"{name} dims"))
        count = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * count, f"{name} payload")
        loaded[name] = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last entry")

    params: dict[str, Tensor] = {}
    for spec in model_param_specs(cfg):
        if spec.name not in loaded:
            raise MissingParameterError(f"checkpoint lacks parameter {spec.name} required by a {cfg.variant.value} model")
        arr = loaded.pop(spec.name)
        if arr.shape != tuple(spec.shape):
            raise ShapeMismatchError(f"{spec.name}: stored shape {arr.shape}, expected {tuple(spec.shape)}")
        params[spec.name] = Tensor(arr.astype(cfg.dtype), requires_grad=True)
    if loaded:
        raise MissingParameterError(f"checkpoint has parameters the config does not use: {sorted(loaded)[:5]}")
    return Seq2SeqModel(cfg, params)


def load_checkpoint(path, config: ModelConfig | None = None) -> Seq2SeqModel:
    """Load a model; ``config`` (if given) must match the stored shapes and variant."""
    return decode(Path(path).read_bytes(), config)

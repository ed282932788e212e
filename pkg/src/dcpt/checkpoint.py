"""Binary checkpoints.

Layout, all integers little-endian::

    b"DCPT" | u32 version=1 | u64 config_len | config JSON (UTF-8)
    repeated until EOF:
        u32 name_len | name | u32 rank | u64 dim * rank | float32 * prod(dims)

Entries follow the model's registration order and include batch-norm
running statistics alongside trainable parameters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig
from .transformer import DeepfakeDetector

MAGIC = b"DCPT"
VERSION = 1

# fields that change the parameter set; precision only changes the in-memory dtype
ARCH_FIELDS = (
    "image_size",
    "in_channels",
    "base_channels",
    "group_layer_counts",
    "phase_depths",
    "phase_heads",
    "ffn_ratio",
    "ablation",
    "num_classes",
)


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


def _state_arrays(model: DeepfakeDetector):
    for name, v in model.named_state():
        yield name, v if isinstance(v, np.ndarray) else v.data


def dumps(model: DeepfakeDetector) -> bytes:
    cfg = model.cfg.to_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(cfg)), cfg]
    for name, arr in _state_arrays(model):
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: DeepfakeDetector, path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)


def read_entries(data: bytes) -> tuple[ModelConfig, list[tuple[str, np.ndarray]]]:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {VERSION}")
    (n,) = r.unpack("<Q", "config length")
    try:
        cfg = ModelConfig.from_json(r.take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"unreadable config block: {exc}") from exc
    entries = []
    while not r.done:
        (ln,) = r.unpack("<I", "name length")
        name = r.take(ln, "parameter name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<I", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"shape of {name}")
        count = int(np.prod(dims, dtype=np.int64))
        raw = r.take(4 * count, f"values of {name}")
        entries.append((name, np.frombuffer(raw, dtype="<f4").reshape(dims)))
    return cfg, entries


def _check_expected(cfg: ModelConfig, expect: ModelConfig) -> None:
    diffs = [f for f in ARCH_FIELDS if getattr(cfg, f) != getattr(expect, f)]
    if diffs:
        detail = ", ".join(f"{f}: checkpoint {getattr(cfg, f)} vs run {getattr(expect, f)}" for f in diffs)
        raise ArchitectureMismatchError(f"checkpoint does not match the requested architecture ({detail})")


def load_model(data: bytes, expect: ModelConfig | None = None) -> DeepfakeDetector:
    cfg, entries = read_entries(data)
    if expect is not None:
        _check_expected(cfg, expect)
    model = DeepfakeDetector(cfg)
    slots = list(model.named_state())
    if [n for n, _ in slots] != [n for n, _ in entries]:
        missing = sorted({n for n, _ in slots} ^ {n for n, _ in entries})
        raise ArchitectureMismatchError(f"parameter names differ from the rebuilt model: {missing[:5]}")
    for (name, slot), (_, arr) in zip(slots, entries):
        target = slot if isinstance(slot, np.ndarray) else slot.data
        if target.shape != arr.shape:
            raise ArchitectureMismatchError(f"{name}: checkpoint shape {arr.shape}, model expects {target.shape}")
        target[...] = arr
    model.eval()
    return model


def load_checkpoint(path, expect: ModelConfig | None = None) -> DeepfakeDetector:
    return load_model(Path(path).read_bytes(), expect)

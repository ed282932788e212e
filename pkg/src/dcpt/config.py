"""Model configuration and the cumulative ablation levels."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

ABLATIONS = ("vanilla", "pooling", "convproj", "reattention")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    in_channels: int = 3
    base_channels: int = 4
    group_layer_counts: list[int] = field(default_factory=lambda: [3, 3, 3, 4, 4])
    phase_depths: list[int] = field(default_factory=lambda: [8, 8, 8])
    phase_heads: list[int] = field(default_factory=lambda: [4, 8, 16])
    lam: float = 10000.0
    ffn_ratio: int = 4
    ablation: str = "reattention"
    num_classes: int = 2
    precision: str = "float32"

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        """Full-size configuration: 224 x 224 faces, 32 base channels."""
        return cls(**{"image_size": 224, "base_channels": 32, **overrides})

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(image_size=32, base_channels=4, phase_depths=[1, 1, 1], phase_heads=[1, 2, 4])
        return cls(**{**base, **overrides})

    # ablation levels are cumulative: each one adds to the previous
    @property
    def level(self) -> int:
        return ABLATIONS.index(self.ablation)

    @property
    def use_pooling(self) -> bool:
        return self.level >= 1

    @property
    def conv_projection(self) -> bool:
        return self.level >= 2

    @property
    def re_attention(self) -> bool:
        return self.level >= 3

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def feature_channels(self) -> int:
        return self.base_channels * 2 ** (len(self.group_layer_counts) - 1)

    @property
    def feature_side(self) -> int:
        side = self.image_size
        for _ in self.group_layer_counts:
            side //= 2
        return side

    def phase_widths(self) -> list[int]:
        c = self.feature_channels
        if not self.use_pooling:
            return [c] * len(self.phase_depths)
        return [c * 2**i for i in range(len(self.phase_depths))]

    def phase_head_counts(self) -> list[int]:
        if not self.use_pooling:
            return [self.phase_heads[0]] * len(self.phase_depths)
        return list(self.phase_heads)

    def validate(self) -> "ModelConfig":
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if len(self.group_layer_counts) != 5 or any(n <= 0 for n in self.group_layer_counts):
            raise ConfigError(f"extractor needs five positive group sizes, got {self.group_layer_counts}")
        if min(self.image_size, self.in_channels, self.base_channels, self.ffn_ratio, self.num_classes) <= 0:
            raise ConfigError("sizes must be positive")
        if self.feature_side < 1:
            raise ConfigError(f"image_size {self.image_size} vanishes after five poolings")
        if len(self.phase_depths) != 3 or len(self.phase_heads) != 3:
            raise ConfigError("transformer needs three phases")
        if any(d <= 0 for d in self.phase_depths) or any(h <= 0 for h in self.phase_heads):
            raise ConfigError("phase depths and head counts must be positive")
        widths, heads = self.phase_widths(), self.phase_head_counts()
        for c, h in zip(widths, heads):
            if c % h:
                raise ConfigError(f"width {c} not divisible by {h} heads")
        if len({c // h for c, h in zip(widths, heads)}) != 1:
            raise ConfigError(f"per-head width must match across phases, got {[c // h for c, h in zip(widths, heads)]}")
        if self.feature_channels % 2:
            raise ConfigError("positional encoding needs an even channel count")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

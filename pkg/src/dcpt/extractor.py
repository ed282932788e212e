"""Convolutional local feature extractor.

Five groups of 3x3 conv + batch norm + GELU layers, each group closed by a
2x2 stride-2 max pool.  The first conv of group ``g`` outputs
``base_channels * 2**g`` channels and the rest keep that width, so the
default stack maps 3 x 224 x 224 to 512 x 7 x 7.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError
from .layers import BatchNorm, Conv2d, Module, ModuleList, max_pool2d
from .rng import RandomSource
from .tensor import ShapeError, Tensor, gelu


@dataclass
class ExtractorConfig:
    in_channels: int = 3
    base_channels: int = 32
    group_layer_counts: list[int] = field(default_factory=lambda: [3, 3, 3, 4, 4])
    input_size: int = 224
    total_layers: int | None = None

    def validate(self) -> "ExtractorConfig":
        if len(self.group_layer_counts) != 5:
            raise ConfigError(f"exactly five groups required, got {len(self.group_layer_counts)}")
        if any(n <= 0 for n in self.group_layer_counts):
            raise ConfigError(f"group sizes must be positive: {self.group_layer_counts}")
        if self.total_layers is not None and sum(self.group_layer_counts) != self.total_layers:
            raise ConfigError(f"group sizes {self.group_layer_counts} do not sum to {self.total_layers}")
        if min(self.in_channels, self.base_channels, self.input_size) <= 0:
            raise ConfigError("sizes must be positive")
        if self.input_size // 32 < 1:
            raise ConfigError(f"input_size {self.input_size} vanishes after five poolings")
        return self

    def channel_schedule(self) -> list[tuple[int, int]]:
        """``(in, out)`` channels of every conv, group-major."""
        pairs = []
        c_in = self.in_channels
        for g, n in enumerate(self.group_layer_counts):
            c_out = self.base_channels * 2**g
            for _ in range(n):
                pairs.append((c_in, c_out))
                c_in = c_out
        return pairs

    @property
    def output_channels(self) -> int:
        return self.base_channels * 2**4

    @property
    def output_side(self) -> int:
        return self.input_size // 32


class ConvBNGelu(Module):
    def __init__(self, c_in, c_out, rng, dtype):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng, stride=1, padding=1, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return gelu(self.bn(self.conv(x)))


class FeatureExtractor(Module):
    def __init__(self, cfg: ExtractorConfig, rng: RandomSource, dtype=np.float32):
        super().__init__()
        self.cfg = cfg.validate()
        schedule = iter(cfg.channel_schedule())
        self.groups = ModuleList()
        for n in cfg.group_layer_counts:
            self.groups.append(ModuleList(ConvBNGelu(*next(schedule), rng, dtype) for _ in range(n)))

    @property
    def num_conv_layers(self) -> int:
        return sum(len(g) for g in self.groups)

    def forward(self, x: Tensor, capture: dict | None = None) -> Tensor:
        """``capture`` receives each group's last activation (pre-pool) keyed by group index."""
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"extractor expects B x {self.cfg.in_channels} x S x S input, got {x.shape}")
        if x.shape[2] != self.cfg.input_size or x.shape[3] != self.cfg.input_size:
            raise ShapeError(f"extractor built for {self.cfg.input_size}px input, got {x.shape[2]}x{x.shape[3]}")
        for g, group in enumerate(self.groups):
            for layer in group:
                x = layer(x)
            if capture is not None:
                capture[g] = x
            x = max_pool2d(x, 2, 2)
        return x


def build_extractor(cfg: ExtractorConfig, rng: RandomSource, dtype=np.float32) -> FeatureExtractor:
    return FeatureExtractor(cfg, rng, dtype)

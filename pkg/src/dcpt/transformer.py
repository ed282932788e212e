"""Three-phase pooling Transformer and the full detector.

Feature maps from the extractor become ``w*w + 1`` tokens (CLS first, patch
tokens in row-major order with a sinusoidal encoding added).  Each block is
post-norm: ``x = LN(x + Attn(x)); x = LN(x + FFN(x))``.  Between phases a
stride-2 convolution doubles the channels and halves the map side.

Cumulative ablation levels switch on pooling, separable-conv QKV projection,
and re-attention (head-mixing of the softmax maps by a learnable ``h x h``
matrix initialised to identity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ModelConfig
from .extractor import ExtractorConfig, FeatureExtractor
from .layers import BatchNorm, Conv2d, LayerNorm, Linear, Module, ModuleList, SeparableConv2d
from .rng import RandomSource
from .tensor import (
    ShapeError,
    Tensor,
    _check_dtypes,
    _make,
    as_tensor,
    concat,
    gelu,
    log_softmax,
    matmul,
    softmax,
    swapaxes,
)


def positional_encoding(w: int, c: int, lam: float = 10000.0, dtype=np.float64) -> np.ndarray:
    """``w*w x c`` sinusoid table; row ``p`` is the row-major patch index."""
    if c % 2:
        raise ShapeError(f"positional encoding needs an even width, got {c}")
    p = np.arange(w * w, dtype=np.float64)[:, None]
    i2 = np.arange(0, c, 2, dtype=np.float64)[None, :]
    angle = p / lam ** (i2 / c)
    pe = np.empty((w * w, c), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(dtype)


@dataclass
class TokenBatch:
    tokens: Tensor  # B x (w*w + 1) x c, CLS at index 0
    side: int | None

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    @property
    def count(self) -> int:
        return self.tokens.shape[1]


def map_to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return swapaxes(x.reshape(b, c, h * w), 1, 2)


def tokens_to_map(t: Tensor, side: int) -> Tensor:
    b, n, c = t.shape
    if n != side * side:
        raise ShapeError(f"{n} tokens do not form a {side}x{side} map")
    return swapaxes(t, 1, 2).reshape(b, c, side, side)


def prepend_cls(patches: Tensor, cls: Tensor) -> Tensor:
    b, _, c = patches.shape
    cls_rows = Tensor(np.zeros((b, 1, c), dtype=patches.dtype)) + cls.reshape(1, 1, c)
    return concat([cls_rows, patches], axis=1)


def tokenize(features: Tensor, cls: Tensor, lam: float = 10000.0, pe: bool = True) -> TokenBatch:
    if features.ndim != 4 or features.shape[2] != features.shape[3]:
        raise ShapeError(f"tokenize needs a square B x c x w x w map, got {features.shape}")
    w, c = features.shape[2], features.shape[1]
    patches = map_to_tokens(features)
    if pe:
        patches = patches + Tensor(positional_encoding(w, c, lam, features.dtype))
    return TokenBatch(prepend_cls(patches, cls), w)


def detokenize(t: TokenBatch) -> Tensor:
    return tokens_to_map(t.tokens[:, 1:, :], t.side)


# ---------------------------------------------------------------------------
# attention


def split_heads(x: Tensor, h: int) -> Tensor:
    b, t, c = x.shape
    if c % h:
        raise ShapeError(f"width {c} not divisible by {h} heads")
    return x.reshape(b, t, h, c // h).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, e = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * e)


def attention_weights(q: Tensor, k: Tensor, h: int) -> Tensor:
    """Row-stochastic maps ``softmax(Q K^T / sqrt(d_K))``, shape B x h x T x T."""
    qh, kh = split_heads(q, h), split_heads(k, h)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    return softmax(matmul(qh, swapaxes(kh, -1, -2)) * scale, axis=-1)


def mix_heads(a: Tensor, theta: Tensor) -> Tensor:
    """``out[:, g] = sum_h theta[h, g] * a[:, h]``, i.e. theta^T applied along heads."""
    _check_dtypes(a, theta)
    h = a.shape[1]
    if theta.shape != (h, h):
        raise ShapeError(f"theta must be {h}x{h} for {h} heads, got {theta.shape}")
    ad, td = a.data, theta.data
    out = np.einsum("bhts,hg->bgts", ad, td)

    def bw(g):
        return np.einsum("bgts,hg->bhts", g, td), np.einsum("bhts,bgts->hg", ad, g)

    return _make(out, (a, theta), bw, "mix_heads")


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, h: int, weights_out: list | None = None) -> Tensor:
    """Concatenated head outputs before the output map."""
    a = attention_weights(q, k, h)
    if weights_out is not None:
        weights_out.append(a)
    return merge_heads(matmul(a, split_heads(v, h)))


def re_attention(q: Tensor, k: Tensor, v: Tensor, theta: Tensor, h: int, weights_out: list | None = None) -> Tensor:
    """Attention with cross-head mixing of the maps; no renormalisation after mixing."""
    a = attention_weights(q, k, h)
    if weights_out is not None:
        weights_out.append(a)
    return merge_heads(matmul(mix_heads(a, theta), split_heads(v, h)))


# ---------------------------------------------------------------------------
# blocks


class ConvProjection(Module):
    """Separable conv + batch norm on the patch map; CLS uses its own affine map."""

    def __init__(self, c, rng, dtype):
        super().__init__()
        self.conv = SeparableConv2d(c, c, 3, rng, dtype=dtype)
        self.bn = BatchNorm(c, dtype=dtype)
        self.cls = Linear(c, c, rng, dtype=dtype)

    def forward(self, t: TokenBatch) -> Tensor:
        if t.side is None:
            raise ShapeError("conv projection needs the spatial side of the token batch")
        patches = tokens_to_map(t.tokens[:, 1:, :], t.side)
        projected = map_to_tokens(self.bn(self.conv(patches)))
        cls = self.cls(t.tokens[:, :1, :])
        return concat([cls, projected], axis=1)


class QKVProjection(Module):
    def __init__(self, c, mode, rng, dtype):
        super().__init__()
        if mode not in ("linear", "separable_conv"):
            raise ConfigError(f"unknown projection mode {mode!r}")
        self.mode = mode
        make = (lambda: Linear(c, c, rng, dtype=dtype)) if mode == "linear" else (lambda: ConvProjection(c, rng, dtype))
        self.q = make()
        self.k = make()
        self.v = make()

    def forward(self, t: TokenBatch):
        if self.mode == "linear":
            x = t.tokens
            return self.q(x), self.k(x), self.v(x)
        return self.q(t), self.k(t), self.v(t)


class TransformerBlock(Module):
    def __init__(self, c, heads, cfg: ModelConfig, rng, dtype):
        super().__init__()
        self.heads = heads
        self.qkv = QKVProjection(c, "separable_conv" if cfg.conv_projection else "linear", rng, dtype)
        self.proj = Linear(c, c, rng, dtype=dtype)
        self.norm1 = LayerNorm(c, dtype=dtype)
        self.fc1 = Linear(c, cfg.ffn_ratio * c, rng, dtype=dtype)
        self.fc2 = Linear(cfg.ffn_ratio * c, c, rng, dtype=dtype)
        self.norm2 = LayerNorm(c, dtype=dtype)
        self.theta = Tensor(np.eye(heads, dtype=dtype), requires_grad=True) if cfg.re_attention else None

    def attend(self, t: TokenBatch, weights_out: list | None = None) -> Tensor:
        q, k, v = self.qkv(t)
        if self.theta is not None:
            return re_attention(q, k, v, self.theta, self.heads, weights_out)
        return multi_head_attention(q, k, v, self.heads, weights_out)

    def forward(self, t: TokenBatch, weights_out: list | None = None) -> TokenBatch:
        x = t.tokens
        x = self.norm1(x + self.proj(self.attend(t, weights_out)))
        x = self.norm2(x + self.fc2(gelu(self.fc1(x))))
        return TokenBatch(x, t.side)


class ConvPooling(Module):
    """Stride-2 3x3 conv with GELU: channels double, side ``w -> floor((w-1)/2) + 1``."""

    def __init__(self, c, rng, dtype):
        super().__init__()
        self.conv = Conv2d(c, 2 * c, 3, rng, stride=2, padding=1, dtype=dtype)
        self.cls = Linear(c, 2 * c, rng, dtype=dtype)

    def forward(self, t: TokenBatch) -> TokenBatch:
        fmap = gelu(self.conv(detokenize(t)))
        side = fmap.shape[2]
        cls = self.cls(t.tokens[:, :1, :])
        return TokenBatch(concat([cls, map_to_tokens(fmap)], axis=1), side)


def conv_pooling(t: TokenBatch, pool: ConvPooling) -> TokenBatch:
    return pool(t)


def classify(t: TokenBatch, head: Linear) -> Tensor:
    """Logits from the CLS token."""
    return head(t.tokens[:, 0, :])


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of the target class, via log-softmax."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    b, n = logits.shape
    if targets.shape[0] != b:
        raise ShapeError(f"{b} logits rows but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise ValueError(f"targets must lie in [0, {n}), got {sorted(set(targets.tolist()))}")
    onehot = np.zeros((b, n), dtype=logits.dtype)
    onehot[np.arange(b), targets] = 1.0
    return (log_softmax(logits, axis=-1) * Tensor(onehot)).sum() * (-1.0 / b)


# ---------------------------------------------------------------------------
# full model


class PoolingTransformer(Module):
    def __init__(self, cfg: ModelConfig, rng: RandomSource, dtype):
        super().__init__()
        self.cfg = cfg
        widths, heads = cfg.phase_widths(), cfg.phase_head_counts()
        self.phases = ModuleList()
        self.pools = ModuleList()
        for i, depth in enumerate(cfg.phase_depths):
            self.phases.append(ModuleList(TransformerBlock(widths[i], heads[i], cfg, rng, dtype) for _ in range(depth)))
            if cfg.use_pooling and i < len(cfg.phase_depths) - 1:
                self.pools.append(ConvPooling(widths[i], rng, dtype))
        self.head = Linear(widths[-1], cfg.num_classes, rng, dtype=dtype)
        # zero head: the untrained model predicts exactly 50/50
        self.head.weight.data[...] = 0.0

    def forward(self, t: TokenBatch, capture: dict | None = None, weights_out: list | None = None) -> Tensor:
        for i, phase in enumerate(self.phases):
            for block in phase:
                t = block(t, weights_out)
            if capture is not None:
                capture[f"phase{i}"] = t
            if self.cfg.use_pooling and i < len(self.phases) - 1:
                t = self.pools[i](t)
        return classify(t, self.head)


class DeepfakeDetector(Module):
    """Extractor -> tokens -> pooling Transformer -> CLS head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg.validate()
        self.seed = seed
        dtype = cfg.dtype
        rng = RandomSource(seed)
        ecfg = ExtractorConfig(cfg.in_channels, cfg.base_channels, list(cfg.group_layer_counts), cfg.image_size)
        self.extractor = FeatureExtractor(ecfg, rng, dtype)
        self.cls_token = Tensor(np.zeros(cfg.feature_channels, dtype=dtype), requires_grad=True)
        self.transformer = PoolingTransformer(cfg, rng, dtype)

    def forward(self, x, capture: dict | None = None, weights_out: list | None = None) -> Tensor:
        x = as_tensor(x)
        if x.dtype != self.cfg.dtype:
            x = Tensor(x.data.astype(self.cfg.dtype))
        groups = {} if capture is not None else None
        feats = self.extractor(x, groups)
        t = tokenize(feats, self.cls_token, self.cfg.lam)
        if capture is not None:
            capture["groups"] = groups
            capture["features"] = feats
            capture["tokens"] = t
        return self.transformer(t, capture, weights_out)

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.forward(x), axis=-1).data


def shape_trace(cfg: ModelConfig, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
    """Shapes at each stage, from the configuration alone."""
    c, w = cfg.feature_channels, cfg.feature_side
    out = [("image", (batch, cfg.in_channels, cfg.image_size, cfg.image_size)), ("features", (batch, c, w, w))]
    widths = cfg.phase_widths()
    for i in range(len(cfg.phase_depths)):
        c = widths[i]
        out.append((f"phase{i}", (batch, w * w + 1, c)))
        if cfg.use_pooling:
            w = (w - 1) // 2 + 1
    out.append(("logits", (batch, cfg.num_classes)))
    return out

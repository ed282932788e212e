"""Layer primitives: convolution, separable convolution, norms, pooling, affine.

Functional forms (``conv2d``, ``batch_norm``...) carry their own backward
rules; the :class:`Module` subclasses own parameters and running statistics.
Convolution is cross-correlation with zero padding.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import RandomSource
from .tensor import ShapeError, Tensor, _check_dtypes, _make, matmul

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-5


class NormStateError(RuntimeError):
    """Eval-mode batch norm called before any running statistics were gathered."""


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (B, C, Ho, Wo, k, k) strided view, no copy
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(dcols: np.ndarray, padded_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # dcols: (B, C, Ho, Wo, k, k)
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[..., i, j]
    return dxp


def _pad(x: np.ndarray, padding: int, value=0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation.

    ``groups`` is 1 (dense, weight ``[out, in, k, k]``) or the input channel
    count (depthwise, weight ``[C, 1, k, k]``).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects B x C x H x W input, got {x.shape}")
    _check_dtypes(x, weight, *(() if bias is None else (bias,)))
    b, c, h, w = x.shape
    out_ch, w_in, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"square kernels only, got {kh}x{kw}")
    k = kh
    depthwise = groups != 1
    if depthwise:
        if groups != c or out_ch != c or w_in != 1:
            raise ShapeError(f"depthwise conv needs weight [{c}, 1, k, k], got {weight.shape} with groups={groups}")
    elif w_in != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {w_in}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)

    xp = _pad(x.data, padding)
    win = _windows(xp, k, stride)
    wd = weight.data
    if depthwise:
        out = np.einsum("bchwij,cij->bchw", win, wd[:, 0], optimize=True)
    else:
        out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)
    assert out.shape == (b, out_ch, ho, wo)

    def bw(g):
        if depthwise:
            gw = np.einsum("bchwij,bchw->cij", win, g, optimize=True)[:, None]
            dcols = g[..., None, None] * wd[:, 0][None, :, None, None]
        else:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            dcols = np.tensordot(g, wd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        dxp = _scatter_windows(dcols, xp.shape, k, stride, ho, wo)
        gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bw, "conv2d")


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2, padding: int = 0) -> Tensor:
    """Window maximum; trailing rows/columns that do not fill a window are dropped.

    The gradient goes to the first maximal element of each window.
    """
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects B x C x H x W input, got {x.shape}")
    if padding > k // 2:
        raise ShapeError(f"padding {padding} exceeds half the kernel {k}")
    b, c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"pool window {k} larger than padded input {h}x{w}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    xp = _pad(x.data, padding, value=-np.inf)
    win = _windows(xp, k, stride).reshape(b, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dcols = np.zeros((b, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(dcols, arg[..., None], g[..., None], axis=-1)
        dxp = _scatter_windows(dcols.reshape(b, c, ho, wo, k, k), xp.shape, k, stride, ho, wo)
        return (dxp[:, :, padding : padding + h, padding : padding + w],)

    return _make(np.ascontiguousarray(out), (x,), bw, "max_pool2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization over every axis except 1.

    In training mode the running statistics are updated in place (running
    variance uses the unbiased batch estimate).
    """
    _check_dtypes(x, gamma, beta)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    n = x.data.size // x.shape[1]
    xd = x.data
    if training:
        if n < 2:
            raise ShapeError(f"batch norm in train mode needs >= 2 values per channel, got {n}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = (xhat * gd + beta.data.reshape(bshape)).astype(xd.dtype, copy=False)

    def bw(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        dxhat = g * gd
        if training:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = inv_std.reshape(bshape) / n * (n * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    _check_dtypes(x, gamma, beta)
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gamma.data
        gx = inv_std / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis, ``x @ weight + bias`` with weight ``[D, D']``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear expects trailing dim {weight.shape[0]}, got {x.shape}")
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, x.shape[-1]), weight)
    if bias is not None:
        y = y + bias
    return y.reshape(*lead, weight.shape[1])


# ---------------------------------------------------------------------------
# modules


class Module:
    """Parameter container with deterministic registration order.

    Parameters, buffers and child modules assigned as attributes are recorded
    in assignment order; ``named_state`` walks them depth first.
    """

    def __init__(self):
        object.__setattr__(self, "_members", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        members = self.__dict__.get("_members")
        if members is not None and isinstance(value, (Tensor, Module)) and not name.startswith("_"):
            members[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._members[name] = _Buffer(self, name)
        object.__setattr__(self, name, value)

    def children(self) -> Iterator["Module"]:
        for v in self._members.values():
            if isinstance(v, Module):
                yield v

    def named_state(self, prefix: str = "") -> Iterator[tuple[str, object]]:
        """Yields ``(name, Tensor)`` for parameters and ``(name, ndarray)`` for buffers."""
        for name, v in self._members.items():
            full = f"{prefix}{name}"
            if isinstance(v, Module):
                yield from v.named_state(full + ".")
            elif isinstance(v, _Buffer):
                yield full, getattr(self, name)
            else:
                yield full, v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, v in self.named_state(prefix):
            if isinstance(v, Tensor) and v.requires_grad:
                yield name, v

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class _Buffer:
    __slots__ = ("owner", "name")

    def __init__(self, owner, name):
        self.owner, self.name = owner, name


def kaiming_uniform(rng: RandomSource, shape, fan_in: int, dtype) -> Tensor:
    """Uniform on ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` (Kaiming uniform with a=sqrt(5))."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, tuple(shape)).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, k, rng, stride=1, padding=0, groups=1, dtype=np.float32):
        super().__init__()
        self.stride, self.padding, self.groups = stride, padding, groups
        w_in = 1 if groups != 1 else in_ch
        self.weight = kaiming_uniform(rng, (out_ch, w_in, k, k), w_in * k * k, dtype)
        self.bias = zeros_param((out_ch,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class SeparableConv2d(Module):
    """Depthwise k x k stage followed by a 1 x 1 pointwise stage."""

    def __init__(self, ch, out_ch, k, rng, padding=None, dtype=np.float32):
        super().__init__()
        padding = k // 2 if padding is None else padding
        self.depthwise = Conv2d(ch, ch, k, rng, padding=padding, groups=ch, dtype=dtype)
        self.pointwise = Conv2d(ch, out_ch, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


def separable_conv2d(x: Tensor, depthwise: Tensor, pointwise: Tensor, depthwise_bias=None, pointwise_bias=None, padding: int = 1) -> Tensor:
    y = conv2d(x, depthwise, depthwise_bias, 1, padding, groups=x.shape[1])
    return conv2d(y, pointwise, pointwise_bias)


class BatchNorm(Module):
    def __init__(self, ch, momentum=BN_MOMENTUM, eps=BN_EPS, dtype=np.float32):
        super().__init__()
        if eps <= 0:
            raise ValueError("batch norm epsilon must be positive")
        self.momentum, self.eps = momentum, eps
        self.gamma = ones_param((ch,), dtype)
        self.beta = zeros_param((ch,), dtype)
        self.register_buffer("running_mean", np.zeros(ch, dtype=dtype))
        self.register_buffer("running_var", np.ones(ch, dtype=dtype))
        self.register_buffer("num_batches", np.zeros(1, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if not self.training and self.num_batches[0] == 0:
            raise NormStateError("batch norm in eval mode has no running statistics yet")
        out = batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps)
        if self.training:
            self.num_batches += 1
        return out


class LayerNorm(Module):
    def __init__(self, dim, eps=LN_EPS, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gamma = ones_param((dim,), dtype)
        self.beta = zeros_param((dim,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32):
        super().__init__()
        self.weight = kaiming_uniform(rng, (d_in, d_out), d_in, dtype)
        self.bias = zeros_param((d_out,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

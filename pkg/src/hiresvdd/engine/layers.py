"""Layers with hand-written backward passes (NCHW layout for images)."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeMismatch
from .core import Module, Parameter, check_finite


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, *, rng, dtype=np.float64,
                 input_grad=True):
        if kernel < 1 or stride < 1:
            raise ConfigError(f"kernel and stride must be >= 1, got {kernel}, {stride}")
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        # the first layer of a network never needs its input gradient
        self.input_grad = input_grad
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeMismatch(f"conv expects (B, {self.in_ch}, H, W), got {x.shape}")
        k, s, p = self.kernel, self.stride, self.padding
        b = x.shape[0]
        ho, wo = self.output_shape(x.shape[2], x.shape[3])
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"input {x.shape[2:]} too small for kernel {k}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, -1)
        wmat = self.weight.value.reshape(self.out_ch, -1)
        out = cols @ wmat.T + self.bias.value
        self._cache = (cols, xp.shape, x.shape, ho, wo)
        return check_finite(out.reshape(b, ho, wo, self.out_ch).transpose(0, 3, 1, 2), "conv2d")

    def backward(self, dy):
        cols, xp_shape, x_shape, ho, wo = self._cache
        k, s, p = self.kernel, self.stride, self.padding
        b = dy.shape[0]
        dym = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        self.weight.accumulate((dym.T @ cols).reshape(self.weight.shape))
        self.bias.accumulate(dym.sum(axis=0))
        if not self.input_grad:
            return None
        dcols = (dym @ self.weight.value.reshape(self.out_ch, -1)).reshape(b, ho, wo, self.in_ch, k, k)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[
                    ..., i, j
                ].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p : p + x_shape[2], p : p + x_shape[3]]
        return dxp


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dy):
        return dy * self._mask


class MaxPool2d(Module):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    def __init__(self, kernel=2):
        self.kernel = kernel

    def forward(self, x):
        k = self.kernel
        b, c, h, w = x.shape
        ho, wo = h // k, w // k
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"input {x.shape[2:]} smaller than pool kernel {k}")
        xr = x[:, :, : ho * k, : wo * k].reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
        xr = xr.reshape(b, c, ho, wo, k * k)
        self._idx = xr.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(xr, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        k = self.kernel
        b, c, h, w = self._shape
        ho, wo = dy.shape[2], dy.shape[3]
        dxr = np.zeros((b, c, ho, wo, k * k), dtype=dy.dtype)
        np.put_along_axis(dxr, self._idx[..., None], dy[..., None], axis=-1)
        dxr = dxr.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * k, wo * k)
        dx = np.zeros(self._shape, dtype=dy.dtype)
        dx[:, :, : ho * k, : wo * k] = dxr
        return dx


class GlobalAvgPool(Module):
    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        b, c, h, w = self._shape
        return np.broadcast_to(dy[:, :, None, None] / (h * w), self._shape).copy()


class Linear(Module):
    """``y = x @ W + b`` over the last axis; leading axes are batch-like."""

    def __init__(self, in_dim, out_dim, *, rng, dtype=np.float64, bias=True, init="he"):
        self.in_dim, self.out_dim = in_dim, out_dim
        if init == "he":
            w = he_normal(rng, (in_dim, out_dim), in_dim, dtype)
        elif init == "xavier":
            w = (rng.standard_normal((in_dim, out_dim)) * math.sqrt(1.0 / in_dim)).astype(dtype)
        elif init == "zeros":
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"linear expects last dim {self.in_dim}, got {x.shape}")
        self._x = x
        y = x @ self.weight.value
        if self.bias is not None:
            y = y + self.bias.value
        return check_finite(y, "linear")

    def backward(self, dy):
        x2 = self._x.reshape(-1, self.in_dim)
        dy2 = dy.reshape(-1, self.out_dim)
        self.weight.accumulate(x2.T @ dy2)
        if self.bias is not None:
            self.bias.accumulate(dy2.sum(axis=0))
        return dy @ self.weight.value.T


class LayerNorm(Module):
    """Per-sample normalization over every non-batch axis, per-channel affine on axis 1.

    For ``(B, C, H, W)`` input this is group normalization with a single group;
    for ``(B, D)`` input it is the usual layer normalization.
    """

    def __init__(self, channels, eps=1e-5, *, dtype=np.float64):
        self.channels, self.eps = channels, eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def _bshape(self, x):
        return (1, self.channels) + (1,) * (x.ndim - 2)

    def forward(self, x):
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"layernorm expects axis 1 of size {self.channels}, got {x.shape}")
        axes = tuple(range(1, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv, axes)
        bs = self._bshape(x)
        return check_finite(xhat * self.gamma.value.reshape(bs) + self.beta.value.reshape(bs), "layernorm")

    def backward(self, dy):
        xhat, inv, axes = self._cache
        bs = self._bshape(dy)
        red = (0,) + tuple(range(2, dy.ndim))
        self.gamma.accumulate((dy * xhat).sum(axis=red))
        self.beta.accumulate(dy.sum(axis=red))
        dxhat = dy * self.gamma.value.reshape(bs)
        return inv * (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        )


class MeanPoolSeq(Module):
    """Average over the sequence axis: ``(B, S, D) -> (B, D)``."""

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=1)

    def backward(self, dy):
        return np.broadcast_to(dy[:, None, :] / self._shape[1], self._shape).copy()


def softmax(x: np.ndarray, axis=-1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over ``(B, S, D)`` sequences.

    No positional encoding, so the layer is permutation-equivariant in S.
    """

    def __init__(self, dim, n_heads, d_k=None, *, rng, dtype=np.float64):
        d_k = dim // n_heads if d_k is None else d_k
        if n_heads < 1 or d_k * n_heads != dim:
            raise ConfigError(f"n_heads * d_k must equal {dim}, got {n_heads} * {d_k}")
        self.dim, self.n_heads, self.d_k = dim, n_heads, d_k
        self.w_q = Parameter(he_normal(rng, (dim, dim), 2 * dim, dtype))
        self.w_k = Parameter(he_normal(rng, (dim, dim), 2 * dim, dtype))
        self.w_v = Parameter(he_normal(rng, (dim, dim), 2 * dim, dtype))
        self.out = Linear(dim, dim, rng=rng, dtype=dtype, init="xavier")
        self.attention = None

    def _split(self, t):
        b, s, _ = t.shape
        return t.reshape(b, s, self.n_heads, self.d_k).transpose(0, 2, 1, 3)

    def _merge(self, t):
        b, _, s, _ = t.shape
        return t.transpose(0, 2, 1, 3).reshape(b, s, self.dim)

    def forward(self, x):
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeMismatch(f"attention expects (B, S, {self.dim}), got {x.shape}")
        q = self._split(x @ self.w_q.value)
        k = self._split(x @ self.w_k.value)
        v = self._split(x @ self.w_v.value)
        scale = 1.0 / math.sqrt(self.d_k)
        attn = softmax(q @ k.transpose(0, 1, 3, 2) * scale)
        heads = attn @ v
        self.attention = attn
        self.heads = heads
        self._cache = (x, q, k, v, attn, scale)
        return self.out.forward(self._merge(heads))

    def backward(self, dy):
        x, q, k, v, attn, scale = self._cache
        dheads = self._split(self.out.backward(dy))
        dattn = dheads @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dheads
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dq, dk, dv = self._merge(dq), self._merge(dk), self._merge(dv)
        x2 = x.reshape(-1, self.dim)
        for param, grad in ((self.w_q, dq), (self.w_k, dk), (self.w_v, dv)):
            param.accumulate(x2.T @ grad.reshape(-1, self.dim))
        return dq @ self.w_q.value.T + dk @ self.w_k.value.T + dv @ self.w_v.value.T

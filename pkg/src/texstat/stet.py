"""Multi-scale statistical texture enhancement on the first decoder grid."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionParams, comprehensive_attention, lwsa
from .ksco import KSCO, QuantizedIntensityEmbedding
from .layers import Conv2d, Module
from .nn_ops import ConfigurationError, pool2d, resize_bilinear
from .tensor import Tensor

DILATIONS = (1, 6, 12)


class TextureFFN(Module):
    """Three parallel dilated 3×3 convolutions then a position-wise MLP, both residual."""

    def __init__(self, rng, channels: int, hidden: int | None = None, dtype=np.float32):
        hidden = hidden or 2 * channels
        self.branches = [Conv2d(rng, channels, channels, 3, padding=d, dilation=d, dtype=dtype, gain=1.0)
                         for d in DILATIONS]
        self.mlp1 = Conv2d(rng, channels, hidden, 1, dtype=dtype)
        self.mlp2 = Conv2d(rng, hidden, channels, 1, dtype=dtype, gain=1.0)

    def forward(self, x: Tensor) -> Tensor:
        y = x
        for branch in self.branches:
            y = y + branch(x)
        return y + self.mlp2(T.relu(self.mlp1(y)))


def texture_enhanced_ffn(x: Tensor, params: TextureFFN) -> Tensor:
    return params(x)


def _downsample_to(x: Tensor, size: tuple[int, int]) -> Tensor:
    h, w = x.shape[-2:]
    th, tw = size
    if h % th or w % tw or h // th != w // tw:
        raise ConfigurationError(f"cannot average-pool {h}×{w} down to {th}×{tw}")
    factor = h // th
    # repeated 2×2 averaging equals one factor×factor average for power-of-two factors
    return x if factor == 1 else pool2d("avg", x, factor, factor)


class STET(Module):
    def __init__(self, rng, n_levels_q: int, enc_channels: Sequence[int], n_levels: int, heads: int, window: int,
                 enable_ca: bool = True, enable_tffn: bool = True, excess_kurtosis: bool = False,
                 dtype=np.float32):
        if len(enc_channels) != 3:
            raise ConfigurationError("STET takes exactly three encoder scales")
        self.d_model = n_levels
        self.enable_ca = enable_ca
        self.kscos = [KSCO(rng, c, n_levels, excess_kurtosis, dtype) for c in enc_channels]
        self.q_proj = Conv2d(rng, n_levels_q, n_levels, 1, dtype=dtype, gain=1.0)
        self.kv_proj = Conv2d(rng, 3 * n_levels, n_levels, 1, dtype=dtype, gain=1.0)
        self.attn = AttentionParams(rng, n_levels, heads, window, dtype)
        if enable_tffn:
            self.tffn = TextureFFN(rng, n_levels, dtype=dtype)

    @property
    def enable_tffn(self) -> bool:
        return "tffn" in vars(self)

    def multiscale_embedding(self, s_q: QuantizedIntensityEmbedding, enc_feats: Sequence[Tensor]):
        q_map = resize_bilinear(s_q.as_map(), factor=2)
        if self.enable_ca:
            q_map = comprehensive_attention(q_map)
        q = self.q_proj(q_map)
        grid = q.shape[-2:]
        scales = []
        for feat, op in zip(enc_feats, self.kscos):
            scales.append(_downsample_to(op(feat).as_map(), grid))
        kv = self.kv_proj(T.concat(scales, axis=-3))
        return q, kv, kv

    def forward(self, s_q: QuantizedIntensityEmbedding, enc_feats: Sequence[Tensor]) -> Tensor:
        q, k, v = self.multiscale_embedding(s_q, enc_feats)
        x = lwsa(q, k, v, self.attn)
        return self.tffn(x) if self.enable_tffn else x


def multiscale_embedding(s_q, enc_feats, params: STET):
    return params.multiscale_embedding(s_q, enc_feats)


def stet_forward(s_q, enc_feats, params: STET) -> Tensor:
    return params(s_q, enc_feats)

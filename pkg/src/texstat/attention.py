"""Comprehensive (directional) attention and local-window multi-head attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Module, uniform_param
from .nn_ops import ConfigurationError
from .tensor import Tensor


@dataclass
class DirectionalAttentionMaps:
    a_h: Tensor     # (..., H, C, C)
    a_w: Tensor     # (..., W, C, C)


def _to_batched(f: Tensor) -> tuple[Tensor, bool]:
    if f.ndim == 3:
        return f.reshape((1,) + f.shape), True
    return f, False


def directional_maps(f: Tensor) -> DirectionalAttentionMaps:
    """Row-softmaxed outer products of the width- and height-pooled descriptors."""
    f, _ = _to_batched(f)
    c = f.shape[1]
    scale = 1.0 / np.sqrt(c)
    fh = f.mean(axis=3).permute(0, 2, 1)          # B×H×C
    fw = f.mean(axis=2).permute(0, 2, 1)          # B×W×C

    def outer(v: Tensor) -> Tensor:
        b, n, _ = v.shape
        return T.softmax(v.reshape(b, n, c, 1) * v.reshape(b, n, 1, c) * scale, axis=-1)

    return DirectionalAttentionMaps(outer(fh), outer(fw))


def comprehensive_attention(f: Tensor, params=None, return_maps: bool = False):
    """``F + A^H·F`` (per row) ``+ A^W·F`` (per column). Parameter-free."""
    fb, squeeze = _to_batched(f)
    maps = directional_maps(fb)
    rows = T.matmul(maps.a_h, fb.permute(0, 2, 1, 3)).permute(0, 2, 1, 3)   # per row h: C×C @ C×W
    cols = T.matmul(maps.a_w, fb.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)   # per column w: C×C @ C×H
    out = fb + rows + cols
    if squeeze:
        out = out.reshape(out.shape[1:])
    return (out, maps) if return_maps else out


def window_partition(f: Tensor, window: int) -> Tensor:
    """``[B×]C×H×W`` → ``P×K²×C`` windows, row-major over windows and within each."""
    fb, _ = _to_batched(f)
    b, c, h, w = fb.shape
    if h % window or w % window:
        raise ConfigurationError(f"window {window} does not divide {h}×{w}")
    nh, nw = h // window, w // window
    x = fb.reshape(b, c, nh, window, nw, window).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b * nh * nw, window * window, c)


def window_merge(windows: Tensor, window: int, shape: tuple[int, ...]) -> Tensor:
    """Inverse of :func:`window_partition` for an input of ``shape``."""
    squeeze = len(shape) == 3
    b, c, h, w = (1,) + tuple(shape) if squeeze else tuple(shape)
    nh, nw = h // window, w // window
    x = windows.reshape(b, nh, nw, window, window, c).permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)
    return x.reshape(c, h, w) if squeeze else x


class AttentionParams(Module):
    """Per-head projections stored as column blocks of ``C×C`` matrices."""

    def __init__(self, rng, channels: int, heads: int, window: int, dtype=np.float32):
        if channels % heads:
            raise ConfigurationError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.window = window
        self.channels = channels
        self.wq = uniform_param(rng, (channels, channels), channels, dtype)
        self.wk = uniform_param(rng, (channels, channels), channels, dtype)
        self.wv = uniform_param(rng, (channels, channels), channels, dtype)
        self.wo = uniform_param(rng, (channels, channels), channels, dtype)

    @classmethod
    def from_arrays(cls, wq, wk, wv, wo, heads: int, window: int) -> "AttentionParams":
        obj = cls.__new__(cls)
        obj.heads, obj.window, obj.channels = heads, window, np.shape(wq)[0]
        obj.wq, obj.wk, obj.wv, obj.wo = (w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=np.float64),
                                                                                    requires_grad=True)
                                          for w in (wq, wk, wv, wo))
        return obj


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, return_weights: bool = False):
    """Windowed MHA on ``P×L×C`` token blocks with residual onto ``q``."""
    p, n, c = q.shape
    heads = params.heads
    dh = c // heads

    def split(x: Tensor, w: Tensor) -> Tensor:
        return T.matmul(x, w).reshape(p, n, heads, dh).permute(0, 2, 1, 3)   # P×heads×L×dh

    qh, kh, vh = split(q, params.wq), split(k, params.wk), split(v, params.wv)
    scores = T.matmul(qh, kh.permute(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    heads_out = T.matmul(weights, vh).permute(0, 2, 1, 3).reshape(p, n, c)
    out = q + T.matmul(heads_out, params.wo)
    return (out, weights) if return_weights else out


def lwsa(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, return_weights: bool = False):
    """Local-window self/cross attention on ``[B×]C×H×W`` maps."""
    if not (q.shape == k.shape == v.shape):
        raise ConfigurationError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-3] != params.channels:
        raise ConfigurationError(f"attention built for {params.channels} channels, got {q.shape[-3]}")
    win = params.window
    qw, kw, vw = (window_partition(x, win) for x in (q, k, v))
    out, weights = multi_head_attention(qw, kw, vw, params, return_weights=True)
    merged = window_merge(out, win, q.shape)
    return (merged, weights) if return_weights else merged

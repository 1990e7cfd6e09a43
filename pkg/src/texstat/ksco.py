"""Kurtosis-guided statistical counting.

A feature map is squeezed to one sigmoid channel, its range is cut into
``N`` evenly spaced levels, and each pixel responds at the level it falls
closest to, weighted by the map's kurtosis.

Shapes carry an optional leading batch axis: ``F`` is ``C×H×W`` or
``B×C×H×W`` and statistics are computed per image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, Module
from .nn_ops import ConfigurationError
from .tensor import Tensor, forward_constant

DEGENERATE_STD = 1e-8


@dataclass(frozen=True)
class QuantizationLevels:
    levels: np.ndarray      # (..., N)
    n_levels: int
    lo: np.ndarray          # (...)
    hi: np.ndarray
    half_width: np.ndarray


@dataclass(frozen=True)
class KurtosisStats:
    kurtosis: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    count: int
    degenerate: np.ndarray


@dataclass(frozen=True)
class QuantizedIntensityEmbedding:
    s: Tensor               # (..., N, H*W)
    levels: QuantizationLevels
    stats: KurtosisStats
    spatial: tuple[int, int]

    def as_map(self) -> Tensor:
        """``N×H×W`` (or batched) view of ``s``."""
        return self.s.reshape(self.s.shape[:-1] + self.spatial)


class Aggregate(Module):
    """Two 1×1 convolutions C → max(C//2, 1) → 1, then sigmoid."""

    def __init__(self, rng, channels: int, dtype=np.float32):
        mid = max(channels // 2, 1)
        self.channels = channels
        self.reduce = Conv2d(rng, channels, mid, 1, dtype=dtype, gain=1.0)
        self.project = Conv2d(rng, mid, 1, 1, dtype=dtype, gain=1.0)

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[-3] != self.channels:
            raise ConfigurationError(f"aggregate expects {self.channels} channels, got {f.shape[-3]}")
        return T.sigmoid(self.project(self.reduce(f)))


def _flat(fa) -> np.ndarray:
    data = fa.data if isinstance(fa, Tensor) else np.asarray(fa, dtype=np.float64)
    if data.shape[-3] != 1:
        raise ConfigurationError(f"aggregation map must have one channel, got {data.shape}")
    return data.reshape(data.shape[:-3] + (-1,))


def quantization_levels(fa, n_levels: int) -> QuantizationLevels:
    """Evenly spaced levels ``W_n = (n(max-min) + N min)/N`` for n = 1..N."""
    if n_levels < 1:
        raise ValueError("n_levels must be at least 1")
    r = _flat(fa)
    lo = r.min(axis=-1)
    hi = r.max(axis=-1)
    n = np.arange(1, n_levels + 1, dtype=r.dtype)
    # same value as the (n(hi-lo) + N lo)/N form, but exact for constant maps
    levels = lo[..., None] + n * (hi - lo)[..., None] / n_levels
    # W_N is the observed maximum by construction; pin it against rounding
    levels[..., -1] = hi
    return QuantizationLevels(levels, n_levels, lo, hi, (hi - lo) / (2 * n_levels))


def kurtosis(fa, excess: bool = False) -> KurtosisStats:
    """Fourth standardized moment with the sample (T-1) standard deviation."""
    r = _flat(fa)
    count = r.shape[-1]
    if count < 2:
        raise ValueError("kurtosis needs at least two samples")
    mean = r.mean(axis=-1)
    centred = r - mean[..., None]
    std = np.sqrt((centred ** 2).sum(axis=-1) / (count - 1))
    degenerate = std < DEGENERATE_STD
    safe = np.where(degenerate, 1.0, std)
    k = ((centred / safe[..., None]) ** 4).mean(axis=-1)
    if excess:
        k = k - 3.0
    k = np.where(degenerate, 0.0, k)
    return KurtosisStats(k, mean, std, count, degenerate)


def quantized_intensity(fa: Tensor, levels: QuantizationLevels, stats: KurtosisStats) -> QuantizedIntensityEmbedding:
    """``S[n, i] = |K| exp(|Fa_i - W_n| - 1)`` inside the active bin, else 0."""
    h, w = fa.shape[-2:]
    flat = fa.reshape(fa.shape[:-3] + (1, h * w))
    lv = levels.levels[..., :, None].astype(fa.dtype)
    dist = T.absolute(flat - Tensor(lv))
    # bin membership is piecewise constant in Fa
    active = forward_constant(lambda: dist.data < levels.half_width[..., None, None])
    weight = (np.abs(stats.kurtosis)[..., None, None] * active).astype(fa.dtype)
    s = T.exp(dist - 1.0) * Tensor(weight)
    return QuantizedIntensityEmbedding(s, levels, stats, (h, w))


class KSCO(Module):
    def __init__(self, rng, channels: int, n_levels: int, excess_kurtosis: bool = False, dtype=np.float32):
        self.aggregate = Aggregate(rng, channels, dtype)
        self.n_levels = n_levels
        self.excess_kurtosis = excess_kurtosis

    def forward(self, f: Tensor) -> QuantizedIntensityEmbedding:
        fa = self.aggregate(f)
        levels, stats = forward_constant(
            lambda: (quantization_levels(fa, self.n_levels), kurtosis(fa, self.excess_kurtosis))
        )
        return quantized_intensity(fa, levels, stats)


def ksco(f: Tensor, n_levels: int, params: KSCO) -> QuantizedIntensityEmbedding:
    if params.n_levels != n_levels:
        raise ConfigurationError(f"operator built for {params.n_levels} levels, asked for {n_levels}")
    return params(f)

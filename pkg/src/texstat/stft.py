"""Bottleneck fusion of structural and statistical texture."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import AttentionParams, comprehensive_attention, lwsa
from .ksco import KSCO, QuantizedIntensityEmbedding
from .layers import Linear, Module
from .nn_ops import pool2d
from .tensor import Tensor


class STFT(Module):
    """Structural path ``lwsa(ca(F))``, statistical path ``KSCO(F)``, gated MLP fusion.

    The MLP output is a per-channel vector added to the structural map at
    every position.
    """

    def __init__(self, rng, channels: int, n_levels: int, heads: int, window: int,
                 enable_ca: bool = True, enable_gating: bool = True, excess_kurtosis: bool = False,
                 dtype=np.float32):
        self.channels = channels
        self.n_levels = n_levels
        self.enable_ca = enable_ca
        self.ksco = KSCO(rng, channels, n_levels, excess_kurtosis, dtype)
        self.attn = AttentionParams(rng, channels, heads, window, dtype)
        if enable_gating:
            self.alpha = Tensor(np.ones((), dtype=dtype), requires_grad=True)
        self.fc1 = Linear(rng, channels + n_levels, channels, dtype, gain=np.sqrt(6.0))
        self.fc2 = Linear(rng, channels, channels, dtype)

    @property
    def enable_gating(self) -> bool:
        return "alpha" in vars(self)

    def structural(self, f: Tensor) -> Tensor:
        x = comprehensive_attention(f) if self.enable_ca else f
        return lwsa(x, x, x, self.attn)

    def gate_input(self, o_str: Tensor, s: QuantizedIntensityEmbedding) -> Tensor:
        o_q = pool2d("global-avg", o_str)
        o_q = o_q.reshape(o_q.shape[:-2])                  # [B×]C
        if self.enable_gating:
            o_q = o_q * self.alpha
        s_q = s.s.sum(axis=-1)                              # [B×]N
        return T.concat([o_q, s_q], axis=-1)

    def forward(self, f: Tensor, return_parts: bool = False):
        o_str = self.structural(f)
        s = self.ksco(f)
        z = self.gate_input(o_str, s)
        squeeze = z.ndim == 1
        if squeeze:
            z = z.reshape(1, -1)
        g = self.fc2(T.relu(self.fc1(z)))
        g = g.reshape(g.shape + (1, 1))
        if squeeze:
            g = g.reshape(g.shape[1:])
        fusion = o_str + g
        if return_parts:
            return fusion, s, {"o_str": o_str, "gate_input": z, "gate": g}
        return fusion, s


def stft_forward(f: Tensor, params: STFT):
    return params(f)

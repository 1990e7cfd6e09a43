"""Spatial operators: convolution, pooling and bilinear resampling.

All accept ``C×H×W`` or batched ``B×C×H×W`` input and return the same rank.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import Tensor, _lift, forward_constant


class ConfigurationError(ValueError):
    pass


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ConfigurationError(f"expected C×H×W or B×C×H×W, got {x.shape}")
    return x, False


def _unbatch(out: Tensor, squeeze: bool) -> Tensor:
    return out.reshape(out.shape[1:]) if squeeze else out


def conv_output_extent(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    span = n + 2 * padding - dilation * (k - 1) - 1
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"extent {n} with k={k}, stride={stride}, padding={padding}, dilation={dilation} "
            "does not give an integer output size"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of ``x`` with ``weight`` (``C_out×C_in×k×k``)."""
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ConfigurationError(f"conv2d expects {ci} input channels, got {c}")
    ho = conv_output_extent(h, kh, stride, padding, dilation)
    wo = conv_output_extent(w, kw, stride, padding, dilation)
    wmat = weight.data.reshape(o, ci * kh * kw)

    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n, c, h * w)
        out = np.matmul(wmat, cols)

        def bw_cols(gcols):
            return gcols.reshape(x.shape)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols6 = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
        offsets = []
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                rs = slice(r0, r0 + stride * (ho - 1) + 1, stride)
                cs = slice(c0, c0 + stride * (wo - 1) + 1, stride)
                cols6[:, :, i, j] = xp[:, :, rs, cs]
                offsets.append((i, j, rs, cs))
        cols = cols6.reshape(n, c * kh * kw, ho * wo)
        out = np.matmul(wmat, cols)
        padded_shape = xp.shape

        def bw_cols(gcols):
            g6 = gcols.reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros(padded_shape, dtype=x.dtype)
            for i, j, rs, cs in offsets:
                gxp[:, :, rs, cs] += g6[:, :, i, j]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            return gxp

    out = out.reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gx = bw_cols(np.matmul(wmat.T, g2)) if x.requires_grad else None
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _unbatch(Tensor._make(out, parents, bw, "conv2d"), squeeze)


def pool2d(kind: str, x: Tensor, window: int | None = None, stride: int | None = None) -> Tensor:
    """``avg``/``max`` pooling over square windows, or ``global-avg`` to 1×1."""
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    if kind == "global-avg":
        return _unbatch(x.mean(axis=(2, 3), keepdims=True), squeeze)
    if kind not in ("avg", "max"):
        raise ValueError(f"unknown pool kind {kind!r}")
    stride = stride or window
    if window > h or window > w:
        raise ConfigurationError(f"pool window {window} exceeds input {h}×{w}")
    if (h - window) % stride or (w - window) % stride:
        raise ConfigurationError(f"pool window {window}/stride {stride} does not tile {h}×{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    slices = []
    for i in range(window):
        for j in range(window):
            slices.append((slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride)))
    stack = np.stack([x.data[:, :, rs, cs] for rs, cs in slices], axis=2)

    if kind == "avg":
        out = stack.mean(axis=2)
        scale = 1.0 / (window * window)

        def bw(g):
            gx = np.zeros_like(x.data)
            gs = g * scale
            for rs, cs in slices:
                gx[:, :, rs, cs] += gs
            return (gx,)
    else:
        # first index in row-major window order wins ties
        idx = forward_constant(lambda: stack.argmax(axis=2))
        out = np.take_along_axis(stack, idx[:, :, None], axis=2)[:, :, 0]

        def bw(g):
            gx = np.zeros_like(x.data)
            for k, (rs, cs) in enumerate(slices):
                gx[:, :, rs, cs] += np.where(idx == k, g, 0)
            return (gx,)

    return _unbatch(Tensor._make(out, (x,), bw, f"{kind}pool"), squeeze)


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Rows map output samples onto input samples (half-pixel centres, edge clamp)."""
    m = np.zeros((n_out, n_in), dtype=dtype_name)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m.setflags(write=False)
    return m


def resize_bilinear(x: Tensor, factor: float | None = None, size: tuple[int, int] | None = None) -> Tensor:
    """Bilinear resize; ``factor=0.5`` is 2×2 average pooling."""
    x = _lift(x)
    h, w = x.shape[-2:]
    if factor == 0.5 and size is None:
        return pool2d("avg", x, 2, 2)
    if size is None:
        if factor is None:
            raise ValueError("give factor or size")
        size = (int(round(h * factor)), int(round(w * factor)))
    th, tw = size
    if th < 1 or tw < 1:
        raise ConfigurationError(f"target size {size} must be positive")
    mh = _interp_matrix(h, th, x.dtype.name)
    mw = _interp_matrix(w, tw, x.dtype.name)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def bw(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return Tensor._make(out, (x,), bw, "resize")

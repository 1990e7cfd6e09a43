"""U-shaped segmentation network with the texture transformers attached.

Encoder levels run double convolutions and 2×2 max pooling; the bottleneck
optionally passes through :class:`STFT`; the decoder upsamples bilinearly
and concatenates skips. When STET is enabled its output joins the first
decoder level (bottleneck ×2 grid) through a 3×3 merge convolution.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig, build_configs, dump_config, read_key_values
from .ksco import KSCO
from .layers import Conv2d, DoubleConv, Module
from .nn_ops import ConfigurationError, pool2d, resize_bilinear
from .stet import STET
from .stft import STFT
from .tensor import Tensor

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"TXST"


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype):
        widths = cfg.widths
        ins = [cfg.in_channels] + widths[:-2]
        self.blocks = [DoubleConv(rng, ci, co, dtype) for ci, co in zip(ins, widths[:-1])]
        self.bottleneck = DoubleConv(rng, widths[-2], widths[-1], dtype)

    def forward(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = pool2d("max", x, 2, 2)
        return skips, self.bottleneck(x)


class Decoder(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype):
        widths = cfg.widths
        # level i (deepest first) maps up(widths[i+1]) ++ skip(widths[i]) -> widths[i]
        self.blocks = [DoubleConv(rng, widths[i + 1] + widths[i], widths[i], dtype)
                       for i in reversed(range(cfg.depth))]


class TextureUNet(Module):
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        cfg.validate()
        self.config = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        widths = cfg.widths
        self.encoder = Encoder(rng, cfg, dtype)
        if cfg.enable_stft:
            self.stft = STFT(rng, widths[-1], cfg.n_levels_stft, cfg.heads, cfg.window,
                             cfg.enable_ca, cfg.enable_gating, cfg.excess_kurtosis, dtype)
        self.decoder = Decoder(rng, cfg, dtype)
        if cfg.enable_stet:
            stet = STET(rng, cfg.n_levels_stft, widths[:3], cfg.n_levels_stet, cfg.heads, cfg.window,
                        cfg.enable_ca, cfg.enable_tffn, cfg.excess_kurtosis, dtype)
            if not cfg.enable_stft:
                # without STFT the query embedding comes from STET's own bottleneck operator
                stet.q_ksco = KSCO(rng, widths[-1], cfg.n_levels_stft, cfg.excess_kurtosis, dtype)
            stet.merge = Conv2d(rng, widths[-2] + cfg.n_levels_stet, widths[-2], 3, padding=1, dtype=dtype)
            self.stet = stet
        self.head = Conv2d(rng, widths[0], 1, 1, dtype=dtype, gain=1.0)

    def forward(self, image: Tensor) -> Tensor:
        image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        squeeze = image.ndim == 3
        if squeeze:
            image = image.reshape((1,) + image.shape)
        expected = (self.config.in_channels,) + tuple(self.config.input_size)
        if tuple(image.shape[1:]) != expected:
            raise ConfigurationError(f"model expects images of shape {expected}, got {image.shape[1:]}")
        skips, x = self.encoder(image)
        s_bottleneck = None
        if "stft" in vars(self):
            x, s_bottleneck = self.stft(x)
        elif "stet" in vars(self):
            s_bottleneck = self.stet.q_ksco(x)
        for i, block in enumerate(self.decoder.blocks):
            skip = skips[-1 - i]
            x = resize_bilinear(x, factor=2)
            x = block(T.concat([x, skip], axis=1))
            if i == 0 and "stet" in vars(self):
                enhanced = self.stet(s_bottleneck, skips[:3])
                x = T.relu(self.stet.merge(T.concat([x, enhanced], axis=1)))
        logits = self.head(x)
        return logits.reshape(logits.shape[1:]) if squeeze else logits

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"parameter names differ; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def build(config: ModelConfig, seed: int | None = None, dtype=np.float32) -> TextureUNet:
    if seed is not None and seed != config.seed:
        import dataclasses
        config = dataclasses.replace(config, seed=seed)
    return TextureUNet(config, dtype)


def forward(model: TextureUNet, image) -> Tensor:
    return model(image)


# ---------------------------------------------------------------------------
# checkpoint file: version byte, magic, u64 header length, UTF-8 header, raw LE data

def save_checkpoint(model: TextureUNet, path: str | Path, extra: dict[str, str] | None = None) -> None:
    lines = ["[config]"]
    lines += dump_config(model.config).splitlines()
    if extra:
        lines.append("[meta]")
        lines += [f"{k}={v}" for k, v in extra.items()]
    lines.append("[params]")
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        arr = np.array(p.data, dtype=p.dtype.newbyteorder("<"), order="C")  # keeps 0-d shapes
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name} {arr.dtype.str} {shape} {offset} {arr.nbytes}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = ("\n".join(lines) + "\n").encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    if raw[1:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if raw[0] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {raw[0]}")
    (hlen,) = struct.unpack_from("<Q", raw, 5)
    start = 13
    header = raw[start:start + hlen].decode()
    data = raw[start + hlen:]
    section = None
    cfg_lines, meta_lines, state = [], [], {}
    for line in header.splitlines():
        if line.startswith("["):
            section = line.strip("[]")
            continue
        if section == "config":
            cfg_lines.append(line)
        elif section == "meta":
            meta_lines.append(line)
        elif section == "params":
            name, dtype, shape, off, nbytes = line.split()
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            arr = np.frombuffer(data, dtype=np.dtype(dtype), count=int(nbytes) // np.dtype(dtype).itemsize,
                                offset=int(off))
            state[name] = arr.reshape(dims).astype(np.dtype(dtype).newbyteorder("="))
    cfg, _ = build_configs(read_key_values("\n".join(cfg_lines)))
    return cfg, state, read_key_values("\n".join(meta_lines))


def load_checkpoint(path: str | Path) -> TextureUNet:
    cfg, state, _ = read_checkpoint(path)
    dtype = next(iter(state.values())).dtype if state else np.float32
    model = TextureUNet(cfg, dtype)
    model.load_state_dict(state)
    return model

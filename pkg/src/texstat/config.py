"""Model/training configuration and the key=value file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .nn_ops import ConfigurationError


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    base_channels: int = 8
    depth: int = 3
    n_levels_stft: int = 16
    n_levels_stet: int = 8
    heads: int = 2
    window: int = 4
    enable_stft: bool = True
    enable_stet: bool = True
    enable_ca: bool = True
    enable_gating: bool = True
    enable_tffn: bool = True
    excess_kurtosis: bool = False
    seed: int = 0

    @property
    def bottleneck_size(self) -> tuple[int, int]:
        f = 2 ** self.depth
        return self.input_size[0] // f, self.input_size[1] // f

    @property
    def widths(self) -> list[int]:
        """Channel width per encoder level, bottleneck last."""
        return [self.base_channels * 2 ** i for i in range(self.depth + 1)]

    def validate(self) -> "ModelConfig":
        h, w = self.input_size
        f = 2 ** self.depth
        if self.depth < 1:
            raise ConfigurationError("depth must be at least 1")
        if min(self.base_channels, self.in_channels, self.n_levels_stft, self.n_levels_stet, self.heads,
               self.window) < 1:
            raise ConfigurationError("channel widths, levels, heads and window must be positive")
        if h % f or w % f:
            raise ConfigurationError(f"input {h}×{w} not divisible by 2^depth = {f}")
        bh, bw = self.bottleneck_size
        if self.enable_stft:
            if bh % self.window or bw % self.window:
                raise ConfigurationError(f"window {self.window} does not divide bottleneck {bh}×{bw}")
            if self.widths[-1] % self.heads:
                raise ConfigurationError(f"bottleneck width {self.widths[-1]} not divisible by heads {self.heads}")
        if self.enable_stet:
            if self.depth < 3:
                raise ConfigurationError("STET needs depth >= 3 (three encoder scales)")
            if (2 * bh) % self.window or (2 * bw) % self.window:
                raise ConfigurationError(f"window {self.window} does not divide STET grid {2 * bh}×{2 * bw}")
            if self.n_levels_stet % self.heads:
                raise ConfigurationError(f"n_levels_stet {self.n_levels_stet} not divisible by heads {self.heads}")
        return self


@dataclass
class TrainConfig:
    batch_size: int = 2
    epochs: int = 200
    learning_rate: float = 2e-3
    weight_decay: float = 1e-8
    decay_factor: float = 0.5
    decay_every_epochs: int = 170
    augment: bool = True
    seed: int = 0
    checkpoint_dir: str = ""

    def validate(self) -> "TrainConfig":
        if min(self.batch_size, self.epochs, self.decay_every_epochs) < 1:
            raise ConfigurationError("batch_size, epochs and decay_every_epochs must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate must be positive and weight_decay non-negative")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError("decay_factor must lie in (0, 1]")
        return self


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().replace(",", "x").split("x")
    parts = [p.strip() for p in parts if p.strip()]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ConfigurationError(f"bad size {text!r}")
    return int(parts[0]), int(parts[1])


def parse_value(cls, key: str, text: str):
    ftypes = {f.name: f.type for f in fields(cls)}
    if key not in ftypes:
        raise ConfigurationError(f"unknown {cls.__name__} key {key!r}")
    kind = ftypes[key]
    try:
        if kind in ("bool", bool):
            return _parse_bool(text)
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
        if "tuple" in str(kind):
            return _parse_size(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from exc


def format_value(value) -> str:
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def read_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_configs(pairs: dict[str, str], base_model: ModelConfig | None = None,
                  base_train: TrainConfig | None = None) -> tuple[ModelConfig, TrainConfig]:
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    m_updates, t_updates = {}, {}
    for key, text in pairs.items():
        if key not in model_keys and key not in train_keys:
            raise ConfigurationError(f"unknown config key {key!r}")
        # ``seed`` lives in both and is set in both
        if key in model_keys:
            m_updates[key] = parse_value(ModelConfig, key, text)
        if key in train_keys:
            t_updates[key] = parse_value(TrainConfig, key, text)
    model = dataclasses.replace(base_model or ModelConfig(), **m_updates)
    train = dataclasses.replace(base_train or TrainConfig(), **t_updates)
    return model, train


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> tuple[ModelConfig, TrainConfig]:
    pairs = read_key_values(Path(path).read_text())
    pairs.update(overrides or {})
    return build_configs(pairs)


def bundled_config(name: str) -> tuple[ModelConfig, TrainConfig]:
    """Load ``desk`` or ``large`` from the configs shipped with the package."""
    text = resources.files("texstat").joinpath("configs", f"{name}.cfg").read_text()
    return build_configs(read_key_values(text))


def dump_config(model: ModelConfig, train: TrainConfig | None = None) -> str:
    lines = [f"{f.name}={format_value(getattr(model, f.name))}" for f in fields(model)]
    if train is not None:
        lines += [f"{f.name}={format_value(getattr(train, f.name))}" for f in fields(train)
                  if f.name != "seed" or train.seed != model.seed]
    return "\n".join(lines) + "\n"

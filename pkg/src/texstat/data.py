"""Image/mask pair loading and a synthetic lesion generator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MASK_THRESHOLD = 127


class DataError(Exception):
    pass


@dataclass(frozen=True)
class SamplePair:
    image: np.ndarray   # 3×H×W float in [0, 1]
    mask: np.ndarray    # 1×H×W in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.shape[-2:] != self.mask.shape[-2:]:
            raise DataError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ spatially")


def _stems(folder: Path, suffixes) -> dict[str, Path]:
    out = {}
    for p in sorted(folder.iterdir()):
        if p.is_file() and p.suffix.lower() in suffixes:
            out[p.stem] = p
    return out


def load_image(path: Path, target_size: tuple[int, int] | None) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if img.mode != "RGB":
        logger.warning("%s: converting mode %s to RGB", path.name, img.mode)
        img = img.convert("RGB")
    if target_size is not None and img.size != (target_size[1], target_size[0]):
        img = img.resize((target_size[1], target_size[0]), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0


def load_mask(path: Path, target_size: tuple[int, int] | None) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    img = img.convert("L")
    if target_size is not None and img.size != (target_size[1], target_size[0]):
        img = img.resize((target_size[1], target_size[0]), Image.NEAREST)
    return (np.asarray(img) > MASK_THRESHOLD).astype(np.float32)[None]


def load_dir(images_path, masks_path, target_size: tuple[int, int] | None = None) -> list[SamplePair]:
    """Pair images and masks by filename stem; ids come back sorted."""
    images = _stems(Path(images_path), IMAGE_SUFFIXES)
    masks = _stems(Path(masks_path), (".png",))
    for stem in sorted(set(images) ^ set(masks)):
        side = "mask" if stem in images else "image"
        raise DataError(f"no {side} found for stem {stem!r}")
    return [SamplePair(load_image(images[s], target_size), load_mask(masks[s], target_size), s)
            for s in sorted(images)]


def load_dataset(root, target_size=None) -> list[SamplePair]:
    """``root/images`` + ``root/masks`` layout."""
    root = Path(root)
    if not (root / "images").is_dir() or not (root / "masks").is_dir():
        raise DataError(f"{root} must contain images/ and masks/")
    return load_dir(root / "images", root / "masks", target_size)


def save_pair(sample: SamplePair, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rgb = np.clip(np.round(sample.image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(root / "images" / f"{sample.id}.png")
    Image.fromarray((sample.mask[0] > 0.5).astype(np.uint8) * 255, "L").save(root / "masks" / f"{sample.id}.png")


# ---------------------------------------------------------------------------
# synthetic lesions

@dataclass
class SynthParams:
    count: int = 8
    size: int = 64
    blobs: tuple[int, int] = (1, 2)
    roughness: float = 0.15
    contrast: float = 0.25
    tail_weight: float = 0.8
    noise_std: float = 0.04
    seed: int = 0


def _periodic_walk(rng: np.random.Generator, n: int, smooth: int = 12) -> np.ndarray:
    """Zero-mean closed random walk, circularly smoothed and scaled to unit peak."""
    steps = rng.normal(size=n)
    walk = np.cumsum(steps - steps.mean())
    kernel = np.ones(smooth) / smooth
    walk = np.real(np.fft.ifft(np.fft.fft(walk) * np.fft.fft(kernel, n)))
    walk -= walk.mean()
    peak = np.abs(walk).max()
    return walk / peak if peak > 0 else walk


def _lesion_mask(rng: np.random.Generator, p: SynthParams) -> np.ndarray:
    n = p.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    mask = np.zeros((n, n), dtype=bool)
    for _ in range(int(rng.integers(p.blobs[0], p.blobs[1] + 1))):
        cy, cx = rng.uniform(0.3 * n, 0.7 * n, size=2)
        ry, rx = rng.uniform(0.12 * n, 0.28 * n, size=2)
        theta0 = rng.uniform(0, math.pi)
        walk = _periodic_walk(rng, 360)
        dy, dx = yy - cy, xx - cx
        ang = np.arctan2(dy, dx)
        # ellipse radius along each pixel's direction, perturbed by the walk
        c, s = np.cos(ang - theta0), np.sin(ang - theta0)
        base = 1.0 / np.sqrt((c / rx) ** 2 + (s / ry) ** 2)
        idx = ((ang + math.pi) / (2 * math.pi) * 360).astype(int) % 360
        radius = base * (1.0 + p.roughness * walk[idx])
        mask |= np.hypot(dy, dx) <= radius
    # keep some background in every sample
    mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = False
    if not mask.any():
        mask[n // 2 - 2:n // 2 + 2, n // 2 - 2:n // 2 + 2] = True
    return mask


def _heavy_tailed(rng: np.random.Generator, shape, std: float, weight: float) -> np.ndarray:
    """Mixture of Laplace (weight) and Gaussian noise with equal variance."""
    gauss = rng.normal(0.0, std, size=shape)
    lap = rng.laplace(0.0, std / math.sqrt(2.0), size=shape)
    pick = rng.random(shape) < weight
    return np.where(pick, lap, gauss)


def synth_sample(rng: np.random.Generator, p: SynthParams, ident: str) -> SamplePair:
    mask = _lesion_mask(rng, p)
    n = p.size
    skin = np.array([0.78, 0.62, 0.52]) + rng.uniform(-0.04, 0.04, size=3)
    lesion = np.clip(skin - p.contrast * np.array([1.0, 1.25, 1.3]) + rng.uniform(-0.03, 0.03, size=3), 0.05, 1)
    grain = rng.normal(0.0, p.noise_std, size=(n, n))
    speckle = _heavy_tailed(rng, (n, n), p.noise_std, p.tail_weight)
    lum = np.where(mask, speckle, grain)
    base = np.where(mask[None], lesion[:, None, None], skin[:, None, None])
    image = np.clip(base + lum[None], 0.0, 1.0).astype(np.float32)
    return SamplePair(image, mask[None].astype(np.float32), ident)


def synth(params: SynthParams) -> list[SamplePair]:
    """Deterministic per ``params.seed``; each sample draws from its own child stream."""
    streams = np.random.SeedSequence(params.seed).spawn(params.count)
    return [synth_sample(np.random.default_rng(s), params, f"synth_{params.seed}_{i:04d}")
            for i, s in enumerate(streams)]


def split(samples, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(samples)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise DataError(f"{n} samples cannot fill a {fractions} split without an empty part")
    order = np.random.default_rng(seed).permutation(n)
    pick = lambda idx: [samples[i] for i in idx]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])

"""Dice-loss training with Adam, step decay and flip augmentation."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import SamplePair
from .metrics import evaluate_logits
from .model import TextureUNet, save_checkpoint
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

DICE_SMOOTH = 1e-6


class DivergenceError(FloatingPointError):
    pass


def dice_loss(pred_prob: Tensor, target) -> Tensor:
    """``1 - (2Σxy + s)/(Σx² + Σy² + s)`` per sample (leading axis when 4-D), averaged."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred_prob.dtype))
    if pred_prob.shape != target.shape:
        raise ValueError(f"prediction {pred_prob.shape} and target {target.shape} differ")
    axes = tuple(range(1, pred_prob.ndim)) if pred_prob.ndim == 4 else None
    inter = (pred_prob * target).sum(axis=axes)
    denom = (pred_prob * pred_prob).sum(axis=axes) + (target * target).sum(axis=axes)
    per_sample = 1.0 - (inter * 2.0 + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return per_sample.mean()


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: OptimizerState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              lr: float, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam with decoupled (multiplicative) weight decay."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay:
            p.data *= (1.0 - lr * weight_decay)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    return config.learning_rate * config.decay_factor ** (epoch // config.decay_every_epochs)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Independent vertical and horizontal flips, each with probability 1/2."""
    if rng.random() < 0.5:
        image, mask = image[..., ::-1, :], mask[..., ::-1, :]
    if rng.random() < 0.5:
        image, mask = image[..., :, ::-1], mask[..., :, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    val_dice: float


@dataclass
class TrainResult:
    model: TextureUNet
    trace: list[EpochRecord]
    best_state: dict
    best_epoch: int
    best_val_dice: float

    def trace_csv(self) -> str:
        lines = ["epoch,loss,lr,val_dice"]
        lines += [f"{r.epoch},{r.loss:.9g},{r.lr:.9g},{r.val_dice:.9g}" for r in self.trace]
        return "\n".join(lines) + "\n"


def predict_logits(model: TextureUNet, images: Sequence[np.ndarray], batch_size: int = 8) -> list[np.ndarray]:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            batch = np.stack(images[i:i + batch_size]).astype(model.dtype)
            out.extend(model(Tensor(batch)).data)
    return out


def mean_dice(model: TextureUNet, samples: Sequence[SamplePair]) -> float:
    logits = predict_logits(model, [s.image for s in samples])
    return evaluate_logits(logits, [s.mask for s in samples]).mean("dice")


def train(model: TextureUNet, dataset: Sequence[SamplePair], config: TrainConfig,
          val: Sequence[SamplePair] | None = None, eval_every: int = 1, log_every: int = 10) -> TrainResult:
    """Train in place; keeps the parameters with the best validation Dice.

    ``val`` defaults to the training set. Raises :class:`DivergenceError`
    on a non-finite loss.
    """
    config.validate()
    if not dataset:
        raise ValueError("empty dataset")
    val = list(val) if val else list(dataset)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = OptimizerState()
    trace: list[EpochRecord] = []
    best_state, best_epoch, best_dice = copy.deepcopy(model.state_dict()), -1, -math.inf
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None

    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            pairs = [(dataset[i].image, dataset[i].mask) for i in idx]
            if config.augment:
                pairs = [augment(img, msk, rng) for img, msk in pairs]
            x = Tensor(np.stack([p[0] for p in pairs]).astype(model.dtype))
            y = Tensor(np.stack([p[1] for p in pairs]).astype(model.dtype))
            loss = dice_loss(T.sigmoid(model(x)), y)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}")
            model.zero_grad()
            loss.backward()
            adam_step(state, params, [p.grad for p in params], lr, config.weight_decay)
            losses.append(value)
        epoch_loss = float(np.mean(losses))
        val_dice = mean_dice(model, val) if (epoch + 1) % eval_every == 0 or epoch == config.epochs - 1 else math.nan
        trace.append(EpochRecord(epoch, epoch_loss, lr, val_dice))
        if not math.isnan(val_dice) and val_dice > best_dice:
            best_dice, best_epoch = val_dice, epoch
            best_state = copy.deepcopy(model.state_dict())
            if ckpt_dir is not None:
                save_checkpoint(model, ckpt_dir / "best.ckpt", {"epoch": str(epoch), "val_dice": repr(val_dice)})
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            logger.info("epoch %d loss %.4f lr %.2e val_dice %.4f", epoch, epoch_loss, lr, val_dice)
    if ckpt_dir is not None:
        save_checkpoint(model, ckpt_dir / "final.ckpt", {"epoch": str(config.epochs - 1)})
    return TrainResult(model, trace, best_state, best_epoch, best_dice)

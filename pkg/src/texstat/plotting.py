"""Figures written next to the CSV outputs (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_fig(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_trace(trace, path):
    epochs = [r.epoch for r in trace]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [r.loss for r in trace], color="C0", label="train dice loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax2 = ax.twinx()
    vd = [(r.epoch, r.val_dice) for r in trace if not np.isnan(r.val_dice)]
    if vd:
        ax2.plot(*zip(*vd), color="C1", label="val dice")
    ax2.set_ylabel("val dice")
    ax2.set_ylim(0, 1.02)
    fig.legend(loc="upper right", fontsize=8)
    return save_fig(fig, path)


def plot_eval_report(report, path):
    ids = [s.id for s in report.samples]
    x = np.arange(len(ids))
    fig, (ax, bx) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax.bar(x - 0.2, [s.dice for s in report.samples], 0.4, label="dice")
    ax.bar(x + 0.2, [s.ja for s in report.samples], 0.4, label="ja")
    ax.set_ylim(0, 1.02)
    ax.set_xticks(x, ids, rotation=90, fontsize=6)
    ax.legend(fontsize=8)
    hd = [s.hd95 for s in report.samples if s.hd95 is not None]
    bx.hist(hd, bins=min(20, max(len(hd), 1)), color="C2")
    bx.set_xlabel("HD95 (px)")
    bx.set_ylabel("samples")
    return save_fig(fig, path)


def plot_embedding(s: np.ndarray, levels: np.ndarray, path):
    """Rows of ``s`` (one per level) as an image, plus per-level totals."""
    fig, (ax, bx) = plt.subplots(1, 2, figsize=(10, 3.5), gridspec_kw={"width_ratios": [3, 1]})
    ax.imshow(s, aspect="auto", interpolation="nearest", cmap="magma")
    ax.set_xlabel("pixel index")
    ax.set_ylabel("level")
    bx.barh(np.arange(len(levels)), s.sum(axis=1), color="C3")
    bx.invert_yaxis()
    bx.set_xlabel("sum over pixels")
    return save_fig(fig, path)

"""Overlap, accuracy and boundary-distance metrics for binary masks."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

RATE_NAMES = ("dice", "miou", "ja", "ac", "ge")


class MetricInputError(ValueError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise MetricInputError(f"{name} is not binary")
    return arr.astype(bool)


def threshold(probabilities, level: float = 0.5) -> np.ndarray:
    return np.asarray(probabilities) >= level


def confusion(pred_mask, gt_mask) -> Confusion:
    pred = _binary(pred_mask, "pred_mask")
    gt = _binary(gt_mask, "gt_mask")
    if pred.shape != gt.shape:
        raise MetricInputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return Confusion(tp, fp, pred.size - tp - fp - fn, fn)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    # 0/0 is vacuous agreement
    if den == 0:
        return 1.0, True
    return num / den, False


def dice(c: Confusion) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)[0]


def jaccard(c: Confusion) -> float:
    return _ratio(c.tp, c.tp + c.fn + c.fp)[0]


def miou(c: Confusion) -> float:
    fg = _ratio(c.tp, c.tp + c.fp + c.fn)[0]
    bg = _ratio(c.tn, c.tn + c.fp + c.fn)[0]
    return 0.5 * (fg + bg)


def accuracy(c: Confusion) -> float:
    return _ratio(c.tp + c.tn, c.total)[0]


def sensitivity(c: Confusion) -> float:
    return _ratio(c.tp, c.tp + c.fn)[0]


def specificity(c: Confusion) -> float:
    return _ratio(c.tn, c.tn + c.fp)[0]


def ge(c: Confusion, geometric: bool = False) -> float:
    """Mean of sensitivity and specificity (arithmetic unless ``geometric``)."""
    se, sp = sensitivity(c), specificity(c)
    return math.sqrt(se * sp) if geometric else 0.5 * (se + sp)


def vacuous(c: Confusion) -> bool:
    """True when some rate fell back to the 0/0 convention."""
    return any(_ratio(0, d)[1] for d in (2 * c.tp + c.fp + c.fn, c.tn + c.fp + c.fn, c.tp + c.fn, c.tn + c.fp))


def boundary(mask) -> np.ndarray:
    """Foreground pixels 4-adjacent to background or to the image edge."""
    m = _binary(mask, "mask")
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(int(math.ceil(q / 100.0 * len(ordered))), 1)
    return float(ordered[rank - 1])


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from each ``src`` pixel to the nearest ``dst`` pixel."""
    _, idx = ndimage.distance_transform_edt(~dst, return_indices=True)
    rows, cols = np.nonzero(src)
    dr = rows - idx[0][rows, cols]
    dc = cols - idx[1][rows, cols]
    return np.sqrt((dr * dr + dc * dc).astype(np.float64))


def hd95(pred_mask, gt_mask) -> float | None:
    """Symmetric 95th-percentile boundary Hausdorff distance in pixels; None if a mask is empty."""
    a = _binary(pred_mask, "pred_mask")
    b = _binary(gt_mask, "gt_mask")
    if a.shape != b.shape:
        raise MetricInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return None
    ba, bb = boundary(a), boundary(b)
    return max(nearest_rank_percentile(_directed_distances(ba, bb), 95),
               nearest_rank_percentile(_directed_distances(bb, ba), 95))


def hausdorff(pred_mask, gt_mask) -> float | None:
    a, b = _binary(pred_mask, "pred_mask"), _binary(gt_mask, "gt_mask")
    if not a.any() or not b.any():
        return None
    ba, bb = boundary(a), boundary(b)
    return float(max(_directed_distances(ba, bb).max(), _directed_distances(bb, ba).max()))


@dataclass
class SampleMetrics:
    id: str
    dice: float
    miou: float
    ja: float
    ac: float
    ge: float
    hd95: float | None
    vacuous: bool = False


@dataclass
class EvalReport:
    samples: list[SampleMetrics] = field(default_factory=list)

    @property
    def undefined_hd95(self) -> int:
        return sum(s.hd95 is None for s in self.samples)

    def mean(self, name: str) -> float:
        if name == "hd95":
            vals = [s.hd95 for s in self.samples if s.hd95 is not None]
        else:
            vals = [getattr(s, name) for s in self.samples]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict[str, float]:
        return {name: self.mean(name) for name in RATE_NAMES + ("hd95",)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", *RATE_NAMES, "hd95"])
        for s in self.samples:
            writer.writerow([s.id, *(f"{getattr(s, n):.6f}" for n in RATE_NAMES),
                             "undefined" if s.hd95 is None else f"{s.hd95:.6f}"])
        summary = self.summary()
        writer.writerow(["mean", *(f"{summary[n]:.6f}" for n in RATE_NAMES), f"{summary['hd95']:.6f}"])
        writer.writerow(["undefined_hd95", self.undefined_hd95])
        return buf.getvalue()


def evaluate_masks(preds, gts, ids=None, geometric_ge: bool = False) -> EvalReport:
    report = EvalReport()
    for i, (p, g) in enumerate(zip(preds, gts)):
        p, g = np.squeeze(np.asarray(p)), np.squeeze(np.asarray(g))
        c = confusion(p, g)
        report.samples.append(SampleMetrics(
            id=str(ids[i]) if ids is not None else str(i),
            dice=dice(c), miou=miou(c), ja=jaccard(c), ac=accuracy(c), ge=ge(c, geometric_ge),
            hd95=hd95(p, g), vacuous=vacuous(c)))
    return report


def evaluate_logits(logits, gts, ids=None, level: float = 0.5, geometric_ge: bool = False) -> EvalReport:
    """Threshold ``sigmoid(logits)`` at ``level`` and score against ``gts``."""
    preds = [threshold(1.0 / (1.0 + np.exp(-np.asarray(l, dtype=np.float64))), level) for l in logits]
    return evaluate_masks(preds, gts, ids, geometric_ge)

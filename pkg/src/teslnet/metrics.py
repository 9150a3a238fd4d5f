"""Pixel-level segmentation metrics: accuracy, sensitivity, specificity,
IoU (Jaccard) and Dice, from exact confusion counts."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


@dataclass
class MetricRow:
    acc: float
    se: float
    sp: float
    iou: float
    dice: float

    def as_table_row(self) -> str:
        """Percentages in IoU, Dice, Acc, Se, Sp order (leaderboard layout)."""
        vals = (self.iou, self.dice, self.acc, self.se, self.sp)
        return ", ".join(f"{100 * v:.2f}" for v in vals)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred, gt = _as_array(pred_mask), _as_array(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    pred, gt = pred.astype(bool), gt.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & gt)),
        tn=int(np.count_nonzero(~pred & ~gt)),
        fp=int(np.count_nonzero(pred & ~gt)),
        fn=int(np.count_nonzero(~pred & gt)),
    )


def compute_metrics(c: ConfusionCounts) -> MetricRow:
    """Acc/Se/Sp/IoU/Dice from counts.

    Zero-denominator convention: an empty ground truth matched by an empty
    prediction is perfect agreement, so Se, Sp, IoU, Dice default to 1.0
    when their denominators vanish.
    """
    if c.total == 0:
        raise ValueError("confusion counts are all zero")
    acc = (c.tp + c.tn) / c.total
    se = c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0
    sp = c.tn / (c.tn + c.fp) if c.tn + c.fp else 1.0
    iou = c.tp / (c.tp + c.fp + c.fn) if c.tp + c.fp + c.fn else 1.0
    dice = 2 * c.tp / (2 * c.tp + c.fp + c.fn) if c.tp + c.fp + c.fn else 1.0
    return MetricRow(acc=acc, se=se, sp=sp, iou=iou, dice=dice)


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """Threshold probabilities (inclusive) to a {0,1} uint8 mask."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be inside (0, 1), got {threshold}")
    p = _as_array(prob)
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("probabilities outside [0, 1]")
    return (p >= threshold).astype(np.uint8)


def _mean_row(rows: Sequence[MetricRow]) -> MetricRow:
    return MetricRow(*(float(np.mean([getattr(r, f) for r in rows]))
                       for f in ("acc", "se", "sp", "iou", "dice")))


def write_metrics_csv(path, entries: Iterable[tuple[str, ConfusionCounts]]):
    """Per-image rows plus mean-over-images and pooled-counts aggregates.

    Values are percentages with two decimals; header: id,acc,se,sp,iou,dice.
    """
    entries = list(entries)
    rows = [(sid, compute_metrics(c)) for sid, c in entries]
    pooled = sum((c for _, c in entries), ConfusionCounts())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "acc", "se", "sp", "iou", "dice"])

        def emit(sid, r):
            w.writerow([sid] + [f"{100 * getattr(r, f):.2f}"
                                for f in ("acc", "se", "sp", "iou", "dice")])

        for sid, r in rows:
            emit(sid, r)
        emit("AGGREGATE_MEAN", _mean_row([r for _, r in rows]))
        emit("AGGREGATE_POOLED", compute_metrics(pooled))

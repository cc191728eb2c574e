"""Pure functions for the training-schedule formulas and the evaluation
metric.  No optimizer or training loop lives here; these exist so the
training recipe the family uses is checkable as arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensorops import LabelMap, ShapeError

__all__ = ["ClassFrequencies", "class_weights", "poly_lr", "mean_iou"]

DEFAULT_SMOOTHING = 1.12


@dataclass(frozen=True)
class ClassFrequencies:
    """Per-class pixel probabilities plus the weighting smoothing constant."""

    p: tuple
    k: float = DEFAULT_SMOOTHING

    def __init__(self, p, k: float = DEFAULT_SMOOTHING):
        object.__setattr__(self, "p", tuple(float(v) for v in p))
        object.__setattr__(self, "k", float(k))
        if self.k <= 0:
            raise ValueError(f"k must be positive, got {self.k}")
        for v in self.p:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"class probability {v} outside [0, 1]")


def class_weights(freqs: ClassFrequencies) -> list:
    """w = 1 / ln(p + k); requires p + k > 1 so every weight is positive
    (natural logarithm)."""
    weights = []
    for v in freqs.p:
        if v + freqs.k <= 1.0:
            raise ValueError(
                f"p + k must exceed 1 for a positive weight, got {v + freqs.k}"
            )
        weights.append(1.0 / math.log(v + freqs.k))
    return weights


def poly_lr(base: float, iter: int, max_iter: int, power: float = 0.9) -> float:
    """base * (1 - iter/max_iter) ** power."""
    if max_iter <= 0:
        raise ValueError(f"max_iter must be positive, got {max_iter}")
    if not 0 <= iter <= max_iter:
        raise ValueError(f"iter {iter} outside [0, {max_iter}]")
    return base * (1.0 - iter / max_iter) ** power


def mean_iou(
    pred: LabelMap,
    gt: LabelMap,
    classes: int,
    ignore_label: int | None = None,
) -> tuple:
    """Per-class intersection-over-union and its mean.

    IoU(c) = TP / (TP + FP + FN).  Classes absent from both maps get NaN
    and are excluded from the mean; pixels whose ground truth equals
    ``ignore_label`` are excluded entirely.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    keep = np.ones(gt.shape, bool)
    if ignore_label is not None:
        keep = gt != ignore_label
    p = pred[keep]
    g = gt[keep]
    for name, arr in (("pred", p), ("gt", g)):
        valid = (arr >= 0) & (arr < classes)
        if ignore_label is not None:
            # a prediction of the ignore value is legal; it just never
            # intersects any real class
            valid |= arr == ignore_label
        if not valid.all():
            raise ValueError(f"{name} contains labels outside [0, {classes})")
    ious = np.full(classes, np.nan)
    for c in range(classes):
        in_p = p == c
        in_g = g == c
        union = int(np.count_nonzero(in_p | in_g))
        if union == 0:
            continue
        tp = int(np.count_nonzero(in_p & in_g))
        ious[c] = tp / union
    present = ious[~np.isnan(ious)]
    miou = float(present.mean()) if present.size else float("nan")
    return ious, miou

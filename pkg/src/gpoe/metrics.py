"""Evaluation metrics for keypoint prediction and mask overlap.

Keypoint metrics: mean end-point error (Euclidean distance between
predicted and ground-truth keypoints), the fraction of keypoints falling
within each of a grid of error thresholds (PCK curve), and the normalized
area under that curve. Mask metrics: intersection-over-union and the F1
score (harmonic precision/recall mean), related by the Dice-Jaccard
identity F1 = 2*IoU / (1 + IoU).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError
from .validation import as_float_array, check_same_shape

#: Default PCK threshold grid: 50 even steps from 0 to half the unit-square
#: diagonal, the natural error scale for coordinates in [0, 1]^2.
DEFAULT_PCK_STEPS = 50


def default_pck_thresholds(steps: int = DEFAULT_PCK_STEPS) -> np.ndarray:
    return np.linspace(0.0, math.sqrt(2.0) / 2.0, steps)


def _keypoint_distances(pred, gt) -> np.ndarray:
    pred = as_float_array(pred, "pred")
    gt = as_float_array(gt, "gt")
    check_same_shape(pred, gt, "keypoint metric")
    if pred.shape[-1] != 2 or pred.size == 0:
        raise ContractError(
            f"keypoints must have a trailing coordinate axis of size 2 and "
            f"at least one point, got shape {pred.shape}"
        )
    return np.linalg.norm(pred - gt, axis=-1)


def mean_epe(pred, gt) -> float:
    """Mean Euclidean distance between predicted and true keypoints.

    Inputs are (..., k, 2) arrays; the mean runs over samples and keypoints.
    """
    return float(_keypoint_distances(pred, gt).mean())


@dataclass(frozen=True)
class PckCurve:
    """Fraction of keypoints within each of an ascending threshold grid."""

    thresholds: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = as_float_array(self.thresholds, "thresholds", ndim=1)
        v = as_float_array(self.values, "values", ndim=1)
        if t.shape != v.shape:
            raise ContractError(
                f"thresholds and values lengths differ: {t.size} vs {v.size}"
            )
        if t.size and (np.any(np.diff(t) <= 0) or t[0] < 0):
            raise ContractError("thresholds must be non-negative and strictly ascending")
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "values", v)


def pck_curve(pred, gt, thresholds) -> PckCurve:
    """Percentage-of-correct-keypoints curve over the given thresholds."""
    thresholds = as_float_array(thresholds, "thresholds", ndim=1)
    if thresholds.size and (np.any(np.diff(thresholds) <= 0) or thresholds[0] < 0):
        raise ContractError("thresholds must be non-negative and strictly ascending")
    distances = _keypoint_distances(pred, gt).ravel()
    values = np.array([(distances <= t).mean() for t in thresholds])
    return PckCurve(thresholds=thresholds, values=values)


def auc(curve: PckCurve) -> float:
    """Trapezoidal area under the curve, normalized by the threshold span."""
    if curve.thresholds.size < 2:
        raise ContractError("AUC requires at least two thresholds")
    span = curve.thresholds[-1] - curve.thresholds[0]
    return float(np.trapezoid(curve.values, curve.thresholds) / span)


def _binarized_counts(pred, gt, threshold: float) -> tuple[int, int, int]:
    pred = as_float_array(pred, "pred mask")
    gt = as_float_array(gt, "gt mask")
    check_same_shape(pred, gt, "mask metric")
    if pred.size and (pred.min() < 0.0 or pred.max() > 1.0):
        raise ContractError("predicted mask values must lie in [0, 1]")
    p = pred >= threshold
    t = gt >= 0.5
    intersection = int(np.count_nonzero(p & t))
    return intersection, int(np.count_nonzero(p)), int(np.count_nonzero(t))


def iou(pred, gt, threshold: float = 0.5) -> float:
    """Intersection over union of the binarized masks; 1 when both are empty."""
    intersection, p, t = _binarized_counts(pred, gt, threshold)
    union = p + t - intersection
    if union == 0:
        return 1.0
    return intersection / union


def f1(pred, gt, threshold: float = 0.5) -> float:
    """Harmonic mean of mask precision and recall (2PR / (P + R)).

    Equals 2*|A&B| / (|A| + |B|); 1 when both masks are empty, 0 when
    exactly one is.
    """
    intersection, p, t = _binarized_counts(pred, gt, threshold)
    if p + t == 0:
        return 1.0
    return 2.0 * intersection / (p + t)


@dataclass
class StratumMetrics:
    """Keypoint/mask metrics over one slice of an evaluation set."""

    count: int
    mean_epe: float
    auc: float
    iou: float
    f1: float

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean_epe": self.mean_epe,
            "auc": self.auc,
            "iou": self.iou,
            "f1": self.f1,
        }


@dataclass
class MetricReport:
    """All metrics for one evaluation run, overall and per corruption stratum."""

    mean_epe: float
    auc: float
    iou: float
    f1: float
    pck: PckCurve
    count: int
    strata: dict[str, StratumMetrics] = field(default_factory=dict)
    loss: dict[str, float] | None = None

    def to_dict(self) -> dict:
        return {
            "mean_epe": self.mean_epe,
            "auc": self.auc,
            "iou": self.iou,
            "f1": self.f1,
            "count": self.count,
            "pck_thresholds": self.pck.thresholds.tolist(),
            "pck_values": self.pck.values.tolist(),
            "strata": {name: s.to_dict() for name, s in self.strata.items()},
            "loss": self.loss,
        }

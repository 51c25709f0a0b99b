"""Threshold-free outlier detection metrics.  Outliers are the positive class."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .scoring import HIGHER_IS_INLIER, LOWER_IS_INLIER


@dataclass
class LabeledScores:
    inlier: np.ndarray
    outlier: np.ndarray
    orientation: str = HIGHER_IS_INLIER

    def __post_init__(self):
        self.inlier = np.asarray(self.inlier, dtype=np.float64).ravel()
        self.outlier = np.asarray(self.outlier, dtype=np.float64).ravel()
        if self.orientation not in (HIGHER_IS_INLIER, LOWER_IS_INLIER):
            raise ValueError(f"unknown orientation {self.orientation!r}")

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        """(outlier, inlier) scores oriented so that larger means more outlier-like."""
        if len(self.inlier) == 0 or len(self.outlier) == 0:
            raise ValueError("need at least one inlier and one outlier score")
        sign = -1.0 if self.orientation == HIGHER_IS_INLIER else 1.0
        return sign * self.outlier, sign * self.inlier


def auroc(s: LabeledScores) -> float:
    """Mann-Whitney estimate P(outlier > inlier) + P(tie) / 2, via average ranks."""
    pos, neg = s.normalized()
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos, n_neg = len(pos), len(neg)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(s: LabeledScores):
    """Cumulative (TP, FP) when predicting 'outlier' for score >= each distinct threshold, high to low."""
    pos, neg = s.normalized()
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]
    tp = np.cumsum(labels)[last_of_group]
    fp = (last_of_group + 1) - tp
    return tp, fp, len(pos), len(neg)


def auprc(s: LabeledScores) -> float:
    """Average precision: sum over thresholds of (recall step) x precision."""
    tp, fp, n_pos, _ = _threshold_counts(s)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * precision))


def fpr_at_tpr(s: LabeledScores, tpr_target: float = 0.80) -> float:
    """Smallest false-positive rate over thresholds whose true-positive rate reaches the target."""
    if not 0.0 < tpr_target <= 1.0:
        raise ValueError("tpr_target must lie in (0, 1]")
    tp, fp, n_pos, n_neg = _threshold_counts(s)
    needed = math.ceil(tpr_target * n_pos - 1e-9)
    ok = tp >= needed
    return float(np.min(fp[ok]) / n_neg)


def all_metrics(s: LabeledScores) -> dict[str, float]:
    return {"auroc": auroc(s), "auprc": auprc(s), "fpr80": fpr_at_tpr(s, 0.80)}

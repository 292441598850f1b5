"""Exact threshold-free detection metrics over pixel score sets.

All three metrics are computed from the full set of (score, label) pairs
with ties handled explicitly: tied scores form a single operating point,
AUROC uses midranks, and nothing is interpolated.  Every metric is
invariant under strictly increasing transforms of the scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricInputError(ValueError):
    """Score/label sets that no metric is defined on."""


@dataclass(frozen=True)
class EvalResult:
    ap: float
    auroc: float
    fpr95: float
    n_pos: int
    n_neg: int


def _checked(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricInputError(f"length mismatch: {s.shape} vs {y.shape}")
    if s.size == 0:
        raise MetricInputError("empty score set")
    if not np.all((y == 0) | (y == 1)):
        raise MetricInputError("labels must be 0 or 1")
    if not np.all(np.isfinite(s)):
        raise MetricInputError("scores must be finite")
    y = y.astype(np.int64)
    if y.sum() == 0 or y.sum() == y.size:
        raise MetricInputError("need at least one positive and one negative")
    return s, y


def _tie_groups(scores: np.ndarray, labels: np.ndarray):
    """Sort descending and collapse tied scores into one operating point.

    Returns cumulative true/false positive counts at the end of each group.
    """
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    last = np.r_[s[:-1] != s[1:], True]  # last index of each tie group
    cum_tp = np.cumsum(y)[last].astype(np.float64)
    cum_fp = np.cumsum(1 - y)[last].astype(np.float64)
    return cum_tp, cum_fp


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic with midranks."""
    s, y = _checked(scores, labels)
    n = s.size
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    first = np.r_[True, ss[1:] != ss[:-1]]
    starts = np.flatnonzero(first)
    ends = np.r_[starts[1:], n]
    # midrank of a tie group spanning sorted slots [a, b): (a + b + 1) / 2, 1-based
    mid = (starts + ends + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(mid, ends - starts)
    n_pos = int(y.sum())
    n_neg = n - n_pos
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores, labels) -> float:
    """AP as the sum of precision-weighted recall increments, no interpolation."""
    s, y = _checked(scores, labels)
    n_pos = float(y.sum())
    cum_tp, cum_fp = _tie_groups(s, y)
    recall = cum_tp / n_pos
    precision = cum_tp / (cum_tp + cum_fp)
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def fpr_at_tpr(scores, labels, target: float = 0.95) -> float:
    """FPR at the first grouped operating point whose TPR reaches ``target``."""
    if not 0.0 < target <= 1.0:
        raise MetricInputError(f"target must be in (0, 1], got {target}")
    s, y = _checked(scores, labels)
    n_pos = float(y.sum())
    n_neg = float(y.size - y.sum())
    cum_tp, cum_fp = _tie_groups(s, y)
    tpr = cum_tp / n_pos
    hit = np.flatnonzero(tpr >= target)
    # TPR reaches 1.0 at the loosest threshold, so a hit always exists
    return float(cum_fp[hit[0]] / n_neg)


def evaluate_scores(scores, labels, target: float = 0.95) -> EvalResult:
    s, y = _checked(scores, labels)
    return EvalResult(
        ap=average_precision(s, y),
        auroc=auroc(s, y),
        fpr95=fpr_at_tpr(s, y, target),
        n_pos=int(y.sum()),
        n_neg=int(y.size - y.sum()),
    )

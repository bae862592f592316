"""Threshold-free and thresholded binary classification metrics.

AUROC is the Mann-Whitney normalization with half-credit for ties; AUPRC is
average precision with tied scores pooled into one group.  Both are computed
with exact arithmetic internally, so the returned float is the correctly
rounded value of the underlying rational number regardless of input order.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import MetricUndefinedError, ValidationError


@dataclass(frozen=True)
class ScoredLabels:
    """Parallel score/label sequences; labels are 0 (negative) or 1 (positive)."""

    scores: tuple[float, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))
        if len(self.scores) != len(self.labels):
            raise ValidationError("scores and labels must have equal length")
        if len(self.scores) == 0:
            raise ValidationError("need at least one scored instance")
        if any(l not in (0, 1) for l in self.labels):
            raise ValidationError("labels must be 0 or 1")
        if not all(np.isfinite(self.scores)):
            raise ValidationError("scores must be finite")

    @property
    def n_positive(self) -> int:
        return sum(self.labels)

    @property
    def n_negative(self) -> int:
        return len(self.labels) - self.n_positive

    @property
    def prevalence(self) -> float:
        return self.n_positive / len(self.labels)


def _require_both_classes(sl: ScoredLabels, metric: str):
    if sl.n_positive == 0 or sl.n_negative == 0:
        raise MetricUndefinedError(f"{metric} is undefined with a single class present")


def _score_groups(sl: ScoredLabels):
    """(group size, group positives) in descending score order, ties pooled."""
    order = sorted(range(len(sl.scores)), key=lambda i: -sl.scores[i])
    groups = []
    i = 0
    while i < len(order):
        j = i
        positives = 0
        while j < len(order) and sl.scores[order[j]] == sl.scores[order[i]]:
            positives += sl.labels[order[j]]
            j += 1
        groups.append((j - i, positives))
        i = j
    return groups


def auroc(sl: ScoredLabels) -> float:
    """Probability a random positive outranks a random negative; ties count half."""
    _require_both_classes(sl, "AUROC")
    # Twice the rank-sum U statistic stays integral, so the final division is
    # the only rounding step.
    groups = _score_groups(sl)
    double_u = 0
    seen_negatives = 0
    for size, positives in reversed(groups):  # ascending score order
        negatives = size - positives
        double_u += positives * (2 * seen_negatives + negatives)
        seen_negatives += negatives
    return float(Fraction(double_u, 2 * sl.n_positive * sl.n_negative))


def auprc(sl: ScoredLabels) -> float:
    """Average precision over descending scores with group-level tie handling."""
    if sl.n_positive == 0:
        raise MetricUndefinedError("AUPRC is undefined without a positive instance")
    ap = Fraction(0)
    cum_count = 0
    cum_positives = 0
    for size, positives in _score_groups(sl):
        cum_count += size
        cum_positives += positives
        if positives:
            ap += Fraction(positives) * Fraction(cum_positives, cum_count)
    return float(ap / sl.n_positive)


def accuracy(sl: ScoredLabels, threshold: float = 0.5) -> float:
    """Fraction of instances whose thresholded score matches the label."""
    predicted = [1 if s >= threshold else 0 for s in sl.scores]
    correct = sum(p == l for p, l in zip(predicted, sl.labels))
    return correct / len(sl.labels)


def balanced_accuracy(sl: ScoredLabels, threshold: float = 0.5) -> float:
    """Mean of the true-positive and true-negative rates at the threshold."""
    _require_both_classes(sl, "balanced accuracy")
    tp = sum(1 for s, l in zip(sl.scores, sl.labels) if l == 1 and s >= threshold)
    tn = sum(1 for s, l in zip(sl.scores, sl.labels) if l == 0 and s < threshold)
    return 0.5 * (tp / sl.n_positive + tn / sl.n_negative)


@dataclass(frozen=True)
class EvalReport:
    """Metric bundle for one evaluated split."""

    accuracy: float
    balanced_accuracy: float
    auroc: float
    auprc: float
    n: int
    prevalence: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "auroc": self.auroc,
            "auprc": self.auprc,
            "n": self.n,
            "prevalence": self.prevalence,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        return EvalReport(
            accuracy=float(d["accuracy"]),
            balanced_accuracy=float(d["balanced_accuracy"]),
            auroc=float(d["auroc"]),
            auprc=float(d["auprc"]),
            n=int(d["n"]),
            prevalence=float(d["prevalence"]),
        )


def evaluate_scores(sl: ScoredLabels, threshold: float = 0.5) -> EvalReport:
    return EvalReport(
        accuracy=accuracy(sl, threshold),
        balanced_accuracy=balanced_accuracy(sl, threshold),
        auroc=auroc(sl),
        auprc=auprc(sl),
        n=len(sl.labels),
        prevalence=sl.prevalence,
    )

"""ROC curves and per-class / mean AUC for multi-label predictions.

AUC is the trapezoidal area under the tie-grouped ROC curve, which equals the
Mann-Whitney statistic with ties counted one half."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class DegenerateLabelsError(ValueError):
    """All-positive or all-negative labels: AUC is undefined."""


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary 0/1")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError(
            f"AUC undefined: {n_pos} positives, {n_neg} negatives")
    return s, y.astype(np.int64)


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) points, one per distinct threshold in descending order,
    with (0,0) prepended and (1,1) appended when absent."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            tp += y[j]
            fp += 1 - y[j]
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def auc(scores, labels) -> float:
    """Area under the ROC curve by trapezoidal integration."""
    points = roc_curve(scores, labels)
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


@dataclass
class RocResult:
    class_names: list[str]
    per_class_auc: list[float | None]         # None where AUC is undefined
    curves: list[list[tuple[float, float]] | None]
    positives: list[int]
    negatives: list[int]
    mean_auc: float | None                    # macro over defined classes

    def to_json(self) -> str:
        return json.dumps({
            "per_class": {n: a for n, a in zip(self.class_names,
                                               self.per_class_auc)},
            "mean_auc": self.mean_auc,
        }, indent=2)

    def format_table(self) -> str:
        width = max(len(n) for n in self.class_names + ["Mean AUC"])
        lines = []
        for name, a in zip(self.class_names, self.per_class_auc):
            cell = f"{a:.4f}" if a is not None else "  n/a (degenerate)"
            lines.append(f"{name:<{width}}  {cell}")
        mean = f"{self.mean_auc:.4f}" if self.mean_auc is not None else "  n/a"
        lines.append("-" * (width + 8))
        lines.append(f"{'Mean AUC':<{width}}  {mean}")
        return "\n".join(lines)


def evaluate(predictions, targets, class_names=None) -> RocResult:
    """Per-class AUC over B x K score/target matrices; degenerate classes are
    excluded from the mean and reported as None."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets)
    if p.shape != t.shape or p.ndim != 2:
        raise ValueError(f"prediction/target shape mismatch: {p.shape} vs {t.shape}")
    k = p.shape[1]
    if class_names is None:
        class_names = [f"class_{i}" for i in range(k)]
    if len(class_names) != k:
        raise ValueError("class_names length must match the class count")

    per_class: list[float | None] = []
    curves = []
    positives, negatives = [], []
    for i in range(k):
        n_pos = int(t[:, i].sum())
        positives.append(n_pos)
        negatives.append(t.shape[0] - n_pos)
        try:
            per_class.append(auc(p[:, i], t[:, i]))
            curves.append(roc_curve(p[:, i], t[:, i]))
        except DegenerateLabelsError:
            per_class.append(None)
            curves.append(None)
    defined = [a for a in per_class if a is not None]
    if not defined:
        raise DegenerateLabelsError("every class is degenerate")
    return RocResult(list(class_names), per_class, curves, positives,
                     negatives, float(np.mean(defined)))

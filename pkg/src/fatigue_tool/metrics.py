"""Binary classification metrics evaluated with each class taken as positive in turn.

Fatigue (class 1) and alert (class 0) are each treated as the positive class;
the two rows are then averaged. ROC curves sweep every distinct score with
samples at the threshold counted positive.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
from sklearn.metrics import accuracy_score, auc as trapezoid_auc, precision_recall_fscore_support
from sklearn.metrics import roc_curve as sk_roc_curve

from fatigue_tool.exceptions import ContractViolationError

Curve = list[tuple[float, float]]
ROC_GRID = np.linspace(0.0, 1.0, 101)
TREATMENTS = {"fatigue_pos": 1, "alert_pos": 0}


@dataclass(frozen=True)
class MetricRow:
    accuracy: float
    precision: float
    recall: float
    f1: float
    no_predicted_positives: bool = False
    no_actual_positives: bool = False

    def values(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def _binary(values: npt.ArrayLike, name: str) -> npt.NDArray[np.int64]:
    arr = np.asarray(values).astype(np.int64).reshape(-1)
    if not np.isin(arr, (0, 1)).all():
        raise ContractViolationError(f"{name} must be binary 0/1")
    return arr


def prf1(preds: npt.ArrayLike, labels: npt.ArrayLike, positive_class: int = 1) -> MetricRow:
    """Accuracy, precision, recall, F1 with ``positive_class`` as positive.

    Precision is 0 when nothing is predicted positive; recall is 0 when no
    sample is positive. Both conditions are flagged on the row.
    """
    y_pred = _binary(preds, "preds")
    y_true = _binary(labels, "labels")
    if y_pred.shape != y_true.shape:
        raise ContractViolationError(f"{y_pred.size} predictions for {y_true.size} labels")
    if positive_class not in (0, 1):
        raise ContractViolationError(f"positive_class must be 0 or 1, got {positive_class}")
    precision, recall, f1, _ = precision_recall_fscore_support(
        y_true, y_pred, pos_label=positive_class, average="binary", zero_division=0.0
    )
    return MetricRow(
        accuracy=float(accuracy_score(y_true, y_pred)),
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
        no_predicted_positives=not np.any(y_pred == positive_class),
        no_actual_positives=not np.any(y_true == positive_class),
    )


def swap_average(rows: Sequence[MetricRow]) -> MetricRow:
    """Column-wise arithmetic mean of the fatigue-positive and alert-positive rows."""
    if len(rows) != 2:
        raise ContractViolationError(f"expected both treatment rows, got {len(rows)}")
    a, b = rows
    return MetricRow(
        accuracy=(a.accuracy + b.accuracy) / 2,
        precision=(a.precision + b.precision) / 2,
        recall=(a.recall + b.recall) / 2,
        f1=(a.f1 + b.f1) / 2,
    )


def class_recall(preds: npt.ArrayLike, labels: npt.ArrayLike, cls: int) -> float:
    """Fraction of class ``cls`` samples predicted as ``cls``; 0 when the class is absent."""
    y_pred = np.asarray(preds).reshape(-1)
    y_true = np.asarray(labels).reshape(-1)
    members = y_true == cls
    return float(np.mean(y_pred[members] == cls)) if members.any() else 0.0


def roc_curve(scores: npt.ArrayLike, labels: npt.ArrayLike, positive_class: int = 1) -> Curve:
    """(FPR, TPR) points for thresholds +inf, every distinct score (descending), -inf."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels, "labels")
    if s.shape != y.shape:
        raise ContractViolationError(f"{s.size} scores for {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ContractViolationError("scores must be finite")
    if np.unique(y).size < 2:
        raise ContractViolationError("ROC needs both classes among the labels")
    fpr, tpr, _ = sk_roc_curve(y, s, pos_label=positive_class, drop_intermediate=False)
    points = [(float(f), float(t)) for f, t in zip(fpr, tpr, strict=True)]
    points.append((1.0, 1.0))
    return points


def auc(curve: Curve) -> float:
    """Trapezoidal area under a curve sorted by FPR."""
    fpr = np.array([p[0] for p in curve])
    tpr = np.array([p[1] for p in curve])
    return float(trapezoid_auc(fpr, tpr))


def _resample(curve: Curve) -> npt.NDArray[np.float64]:
    """TPR of the piecewise-linear curve at each grid FPR; vertical jumps take their top."""
    fpr = np.array([p[0] for p in curve])
    tpr = np.array([p[1] for p in curve])
    xs = np.unique(fpr)
    upper = np.array([tpr[fpr == x].max() for x in xs])
    lower = np.array([tpr[fpr == x].min() for x in xs])
    left = np.clip(np.searchsorted(xs, ROC_GRID, side="right") - 1, 0, xs.size - 1)
    out = upper[left].astype(np.float64)
    between = (left < xs.size - 1) & (ROC_GRID > xs[left])
    j = left[between]
    frac = (ROC_GRID[between] - xs[j]) / (xs[j + 1] - xs[j])
    out[between] = upper[j] + frac * (lower[j + 1] - upper[j])
    return out


def average_roc(curve_a: Curve, curve_b: Curve) -> Curve:
    """Pointwise mean TPR of both curves on a 101-point FPR grid (0.00 to 1.00)."""
    tpr = (_resample(curve_a) + _resample(curve_b)) / 2.0
    return [(float(f), float(t)) for f, t in zip(ROC_GRID, tpr, strict=True)]


def ema_corrected(series: Sequence[float], beta: float = 0.9) -> list[float]:
    """Exponential moving average divided by (1 - beta^t) to undo the zero start."""
    if not 0.0 < beta < 1.0:
        raise ContractViolationError(f"beta must lie in (0, 1), got {beta}")
    out: list[float] = []
    m = 0.0
    for t, x in enumerate(series, start=1):
        m = beta * m + (1.0 - beta) * float(x)
        out.append(m / (1.0 - beta**t))
    return out


@dataclass
class MetricsReport:
    """Both polarity treatments, their average, and per-treatment ROC curves."""

    rows: dict[str, MetricRow]
    average: MetricRow
    class_recall: dict[str, float]
    curves: dict[str, Curve] = field(default_factory=dict)
    aucs: dict[str, float] = field(default_factory=dict)
    samples: int = 0

    def to_text(self) -> str:
        """``key<TAB>value`` lines followed by one CSV block per ROC curve."""
        lines = [f"samples\t{self.samples}"]
        for treatment, row in [*self.rows.items(), ("average", self.average)]:
            lines.extend(f"{treatment}.{name}\t{value:.6f}" for name, value in row.values().items())
            if row.no_predicted_positives:
                lines.append(f"{treatment}.flag\tno_predicted_positives")
            if row.no_actual_positives:
                lines.append(f"{treatment}.flag\tno_actual_positives")
        lines.extend(
            f"{name}.recall_per_class\t{value:.6f}" for name, value in self.class_recall.items()
        )
        lines.extend(f"{name}.auc\t{value:.6f}" for name, value in self.aucs.items())
        for name, curve in self.curves.items():
            lines.append("")
            lines.append(f"# roc {name}")
            lines.append("fpr,tpr")
            lines.extend(f"{f!r},{t!r}" for f, t in curve)
        return "\n".join(lines) + "\n"

    def table_rows(self) -> list[dict[str, str]]:
        return [
            {"treatment": name, **{k: f"{v:.4f}" for k, v in row.values().items()}}
            for name, row in [*self.rows.items(), ("average", self.average)]
        ]


def build_report(
    preds: npt.ArrayLike,
    labels: npt.ArrayLike,
    fatigue_scores: npt.ArrayLike | None = None,
) -> MetricsReport:
    """Metrics for binary predictions; ROC curves when per-sample fatigue scores are given.

    The alert-positive ROC uses 1 - fatigue score as its score.
    """
    y_pred = _binary(preds, "preds")
    y_true = _binary(labels, "labels")
    rows = {name: prf1(y_pred, y_true, cls) for name, cls in TREATMENTS.items()}
    report = MetricsReport(
        rows=rows,
        average=swap_average(list(rows.values())),
        class_recall={
            "fatigue": class_recall(y_pred, y_true, 1),
            "alert": class_recall(y_pred, y_true, 0),
        },
        samples=int(y_true.size),
    )
    if fatigue_scores is not None and np.unique(y_true).size == 2:
        s = np.asarray(fatigue_scores, dtype=np.float64).reshape(-1)
        report.curves["fatigue_pos"] = roc_curve(s, y_true, 1)
        report.curves["alert_pos"] = roc_curve(1.0 - s, y_true, 0)
        report.curves["average"] = average_roc(
            report.curves["fatigue_pos"], report.curves["alert_pos"]
        )
        report.aucs = {name: auc(curve) for name, curve in report.curves.items()}
    return report


def binarize(classes: npt.ArrayLike, k: int) -> npt.NDArray[np.int64]:
    """Fatigue (1) for classes in the upper half of ``k`` bins, alert (0) otherwise."""
    return (np.asarray(classes) >= (k + 1) // 2).astype(np.int64)


def fatigue_probability(
    scores: npt.ArrayLike, k: int, head: str = "categorical"
) -> npt.NDArray[np.float64]:
    """Per-sample fatigue score: probability mass on the upper bins, or the sigmoid output."""
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if head == "continuous":
        return s[:, 1]
    return s[:, (k + 1) // 2 :].sum(axis=1)


def video_level(
    video_ids: Sequence[str], fatigue_scores: npt.ArrayLike, labels: npt.ArrayLike
) -> tuple[list[str], npt.NDArray[np.float64], npt.NDArray[np.int64]]:
    """Mean fatigue score per video (sorted by id) and each video's binary label."""
    s = np.asarray(fatigue_scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    ids = sorted(set(video_ids))
    index = {v: i for i, v in enumerate(ids)}
    rows = np.array([index[v] for v in video_ids])
    counts = np.bincount(rows, minlength=len(ids))
    means = np.bincount(rows, weights=s, minlength=len(ids)) / counts
    video_labels = np.zeros(len(ids), dtype=np.int64)
    video_labels[rows] = y
    return ids, means, video_labels

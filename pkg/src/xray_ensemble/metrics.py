"""ROC curve, AUC and TPR for the consolidation (class 1) score."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

DEFAULT_THRESHOLD = 0.5


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y


def roc_curve(scores, labels) -> RocCurve:
    """One ROC point per distinct score, using ``score >= threshold``.

    The first threshold is ``+inf`` (nothing predicted positive), so the
    curve always starts at (0, 0) and ends at (1, 1).
    """
    s, y = _check(scores, labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both positive and negative labels")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    pos_sorted = (y[order] == 1).astype(np.int64)
    # last position of each run of equal scores
    run_end = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tp = np.cumsum(pos_sorted)[run_end]
    fp = (run_end + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s_sorted[run_end]]
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    dx = np.diff(curve.fpr)
    return float(np.sum(dx * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def roc_auc(scores, labels) -> float:
    return auc(roc_curve(scores, labels))


def tpr_at_threshold(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> float:
    s, y = _check(scores, labels)
    positives = y == 1
    if not positives.any():
        raise UndefinedMetricError("TPR is undefined without positive labels")
    return float(np.mean(s[positives] >= threshold))


def write_summary_csv(path: str | os.PathLike, rows: list[tuple[str, float, float]]) -> None:
    """Write ``model,auc,tpr`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "auc", "tpr"])
        for name, a, t in rows:
            w.writerow([name, repr(float(a)), repr(float(t))])

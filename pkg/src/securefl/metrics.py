"""Classification metrics and paired-comparison statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .errors import DegenerateInputError


def confusion_matrix(truth, pred, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    truth, pred = np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise ValueError("truth and predictions differ in length")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def mcc_from_confusion(cm: np.ndarray) -> float:
    """Multiclass Matthews correlation (Gorodkin's R_K); 0 when the denominator vanishes."""
    cm = np.asarray(cm, dtype=np.float64)
    s = cm.sum()
    c = np.trace(cm)
    t = cm.sum(axis=1)
    p = cm.sum(axis=0)
    num = c * s - p @ t
    den = np.sqrt((s * s - p @ p) * (s * s - t @ t))
    return float(num / den) if den > 0 else 0.0


def mcc(truth, pred, num_classes: int | None = None) -> float:
    k = num_classes or int(max(np.max(truth), np.max(pred))) + 1
    return mcc_from_confusion(confusion_matrix(truth, pred, k))


def cohens_kappa(a, b, num_classes: int | None = None) -> float:
    """Chance-corrected agreement; defined as 1 (perfect) or 0 when expected agreement is 1."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("rating vectors differ in length")
    if a.size == 0:
        raise DegenerateInputError("no ratings")
    k = num_classes or int(max(a.max(), b.max())) + 1
    cm = confusion_matrix(a, b, k).astype(np.float64)
    n = cm.sum()
    po = np.trace(cm) / n
    pe = float(cm.sum(axis=1) @ cm.sum(axis=0)) / (n * n)
    if np.isclose(pe, 1.0, rtol=0, atol=1e-15):
        return 1.0 if po == 1.0 else 0.0
    return float((po - pe) / (1.0 - pe))


def mcnemar_test(pred_a, pred_b, truth) -> tuple[float, float]:
    """Continuity-corrected McNemar statistic and chi-square(1) p-value.

    ``b`` counts samples only ``pred_a`` got right, ``c`` those only ``pred_b`` got right.
    """
    pred_a, pred_b, truth = map(np.asarray, (pred_a, pred_b, truth))
    if not pred_a.shape == pred_b.shape == truth.shape:
        raise ValueError("prediction and truth vectors differ in length")
    ok_a, ok_b = pred_a == truth, pred_b == truth
    b = int(np.sum(ok_a & ~ok_b))
    c = int(np.sum(~ok_a & ok_b))
    if b + c == 0:
        return 0.0, 1.0
    stat = (abs(b - c) - 1.0) ** 2 / (b + c)
    return float(stat), float(stats.chi2.sf(stat, df=1))


def binary_auc(scores, positive) -> float:
    """Area under the ROC curve via midpoint ranks (Mann-Whitney U)."""
    scores, positive = np.asarray(scores, dtype=np.float64), np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = stats.rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc_weighted(truth, scores) -> float:
    """One-vs-rest AUC per class, averaged with class-frequency weights.

    Classes absent from ``truth`` get zero weight; returns nan if no class
    has both positives and negatives.
    """
    truth, scores = np.asarray(truth), np.asarray(scores, dtype=np.float64)
    k = scores.shape[1]
    total, weight = 0.0, 0
    for cls in range(k):
        pos = truth == cls
        auc = binary_auc(scores[:, cls], pos)
        if not np.isnan(auc):
            total += auc * pos.sum()
            weight += pos.sum()
    return total / weight if weight else float("nan")


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: list
    specificity: list
    sensitivity_macro: float
    specificity_macro: float
    mcc: float
    roc_auc_weighted: float
    confusion: list
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_report(truth, pred, scores=None, num_classes: int | None = None) -> MetricsReport:
    truth, pred = np.asarray(truth), np.asarray(pred)
    if truth.size == 0:
        raise DegenerateInputError("cannot evaluate on an empty dataset")
    k = num_classes or (scores.shape[1] if scores is not None else int(max(truth.max(), pred.max())) + 1)
    cm = confusion_matrix(truth, pred, k)
    n = int(cm.sum())
    tp = np.diag(cm).astype(np.float64)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = n - tp - fn - fp
    with np.errstate(invalid="ignore", divide="ignore"):
        sens = np.where(tp + fn > 0, tp / (tp + fn), np.nan)
        spec = np.where(tn + fp > 0, tn / (tn + fp), np.nan)
    auc = roc_auc_weighted(truth, scores) if scores is not None else float("nan")
    return MetricsReport(
        accuracy=float(tp.sum() / n),
        sensitivity=[float(v) for v in sens],
        specificity=[float(v) for v in spec],
        sensitivity_macro=float(np.nanmean(sens)) if np.any(~np.isnan(sens)) else float("nan"),
        specificity_macro=float(np.nanmean(spec)) if np.any(~np.isnan(spec)) else float("nan"),
        mcc=mcc_from_confusion(cm),
        roc_auc_weighted=auc,
        confusion=cm.tolist(),
        n=n,
    )


def evaluate(params, x, y, batch_size: int = 256) -> MetricsReport:
    """Metrics of a model on a labelled dataset."""
    from .nn import predict_proba

    if len(x) == 0:
        raise DegenerateInputError("cannot evaluate on an empty dataset")
    proba = predict_proba(params, x, batch_size)
    return metrics_report(y, proba.argmax(axis=1), proba, params.arch.num_classes)

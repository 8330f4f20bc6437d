"""Confusion-matrix metrics, agreement statistics, chi-square independence test, ROC/AUC."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np


class ConfusionMatrix:
    """C x C count matrix; rows are true classes, columns predictions."""

    def __init__(self, counts):
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("confusion matrix entries must be non-negative")
        self.counts = counts.astype(np.int64)

    @classmethod
    def from_predictions(cls, labels, preds, num_classes: int) -> "ConfusionMatrix":
        cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
        return cls(cm)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix({self.counts.tolist()})"


def _counts(cm) -> np.ndarray:
    c = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {c.shape}")
    if c.sum() <= 0:
        raise ValueError("metric undefined on an empty confusion matrix")
    return c.astype(np.float64)


def one_vs_rest(cm) -> dict[str, np.ndarray]:
    """Per-class TP, FP, FN, TN arrays."""
    c = _counts(cm)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    tn = c.sum() - tp - fp - fn
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn}


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class BasicMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    micro_precision: float
    micro_recall: float
    micro_f1: float
    weighted_f1: float
    zero_prediction_classes: list[int] = field(default_factory=list)


def basic_metrics(cm) -> BasicMetrics:
    """Accuracy plus macro precision/recall/F1 from one-vs-rest counts.

    A class that is never predicted gets precision 0 and is listed in
    ``zero_prediction_classes``; F1 is 0 whenever precision + recall is 0.
    """
    c = _counts(cm)
    r = one_vs_rest(c)
    tp, fp, fn = r["tp"], r["fp"], r["fn"]
    prec = _safe_div(tp, tp + fp)
    rec = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * prec * rec, prec + rec)
    support = c.sum(axis=1)
    micro_p = tp.sum() / (tp.sum() + fp.sum())
    micro_r = tp.sum() / (tp.sum() + fn.sum())
    micro_f1 = 0.0 if micro_p + micro_r == 0 else 2 * micro_p * micro_r / (micro_p + micro_r)
    return BasicMetrics(
        accuracy=float(np.trace(c) / c.sum()),
        precision=float(prec.mean()),
        recall=float(rec.mean()),
        f1=float(f1.mean()),
        per_class_precision=prec,
        per_class_recall=rec,
        per_class_f1=f1,
        micro_precision=float(micro_p),
        micro_recall=float(micro_r),
        micro_f1=float(micro_f1),
        weighted_f1=float((f1 * support).sum() / support.sum()),
        zero_prediction_classes=[int(i) for i in np.flatnonzero(tp + fp == 0)],
    )


def kappa(cm) -> float:
    """Cohen's kappa (p_o - p_e) / (1 - p_e); 0 when p_e == 1."""
    return kappa_detail(cm)[0]


def kappa_detail(cm) -> tuple[float, bool]:
    c = _counts(cm)
    n = c.sum()
    po = np.trace(c) / n
    pe = float((c.sum(axis=1) * c.sum(axis=0)).sum() / (n * n))
    if pe == 1.0:
        return 0.0, True
    return float((po - pe) / (1 - pe)), False


def mcc(cm) -> float:
    """Matthews correlation; the covariance form for C > 2, 0 on a zero denominator."""
    return mcc_detail(cm)[0]


def mcc_detail(cm) -> tuple[float, bool]:
    c = _counts(cm)
    if c.shape[0] == 2:
        tn, fp, fn, tp = c[0, 0], c[0, 1], c[1, 0], c[1, 1]
        den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        if den == 0:
            return 0.0, True
        return float((tp * tn - fp * fn) / math.sqrt(den)), False
    s = c.sum()
    correct = np.trace(c)
    pred = c.sum(axis=0)
    true = c.sum(axis=1)
    cov_xy = correct * s - (pred * true).sum()
    cov_xx = s * s - (pred * pred).sum()
    cov_yy = s * s - (true * true).sum()
    if cov_xx == 0 or cov_yy == 0:
        return 0.0, True
    return float(cov_xy / math.sqrt(cov_xx * cov_yy)), False


def error_rate(cm) -> float:
    c = _counts(cm)
    return float((c.sum() - np.trace(c)) / c.sum())


# -- chi-square --------------------------------------------------------------

GAMMA_EPS = 1e-15
GAMMA_MAX_ITER = 10_000


def _gamma_p_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(GAMMA_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * GAMMA_EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_cf(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, GAMMA_MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < GAMMA_EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularised upper incomplete gamma Q(a, x)."""
    if a <= 0:
        raise ValueError(f"shape must be positive, got {a}")
    if x < 0:
        raise ValueError(f"x must be non-negative, got {x}")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _gamma_p_series(a, x))
    return min(1.0, _gamma_q_cf(a, x))


def chi2_sf(stat: float, dof: int) -> float:
    """Upper-tail probability of a chi-square statistic."""
    return gamma_q(dof / 2.0, stat / 2.0)


@dataclass
class ChiSquareResult:
    chi2: float
    dof: int
    p: float


def chi_square_p(cm) -> ChiSquareResult:
    """Independence test of true vs predicted labels with (C-1)^2 degrees of freedom."""
    c = _counts(cm)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    for i in np.flatnonzero(rows == 0):
        raise ValueError(f"chi-square undefined: row {i} (true class) has zero total")
    for j in np.flatnonzero(cols == 0):
        raise ValueError(f"chi-square undefined: column {j} (predicted class) has zero total")
    expected = np.outer(rows, cols) / c.sum()
    stat = float(((c - expected) ** 2 / expected).sum())
    dof = (c.shape[0] - 1) ** 2
    return ChiSquareResult(stat, dof, chi2_sf(stat, dof))


# -- ROC / AUC -------------------------------------------------------------

@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def binary_roc(scores, positives) -> RocCurve:
    """ROC over distinct score thresholds; tied scores move diagonally (half credit)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(positives, dtype=bool).reshape(-1)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    ends = np.concatenate([distinct, [s.size - 1]])
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    thresholds = np.concatenate([[np.inf], s[ends]])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, thresholds, auc)


@dataclass
class RocResult:
    per_class_auc: dict[int, float]
    micro_auc: float
    curves: dict[str, RocCurve]


def roc_auc(scores, labels) -> RocResult:
    """One-vs-rest AUC per class plus the micro average over all (score, indicator) pairs.

    Classes without both positives and negatives are left out of ``per_class_auc``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if s.ndim != 2 or s.shape[0] != y.size:
        raise ValueError(f"scores must be (N, C) with N={y.size}, got {s.shape}")
    if y.size < 2:
        raise ValueError("ROC needs at least two samples")
    n, c = s.shape
    onehot = np.zeros((n, c), dtype=bool)
    onehot[np.arange(n), y] = True
    per, curves = {}, {}
    for k in range(c):
        pos = onehot[:, k]
        if pos.all() or not pos.any():
            continue
        curve = binary_roc(s[:, k], pos)
        per[k] = curve.auc
        curves[str(k)] = curve
    micro = binary_roc(s.reshape(-1), onehot.reshape(-1))
    curves["micro"] = micro
    return RocResult(per, micro.auc, curves)


# -- reports -----------------------------------------------------------------

REPORT_FIELDS = ("accuracy", "precision", "recall", "f1", "kappa", "mcc", "error_rate", "chi2_p")


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    kappa: float
    mcc: float
    error_rate: float
    chi2_p: float
    auc: dict = field(default_factory=dict)
    micro_auc: float = float("nan")
    flags: list[str] = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        w.writerow([_fmt(getattr(self, k)) for k in REPORT_FIELDS])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{k:<12}{_fmt(getattr(self, k)):>14}" for k in REPORT_FIELDS]
        for k, v in sorted(self.auc.items()):
            lines.append(f"{'auc[' + str(k) + ']':<12}{_fmt(v):>14}")
        lines.append(f"{'micro_auc':<12}{_fmt(self.micro_auc):>14}")
        if self.flags:
            lines.append("flags: " + "; ".join(self.flags))
        return "\n".join(lines)


def _fmt(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def metrics_report(cm, scores=None, labels=None, average: str = "macro") -> MetricsReport:
    """Every reported statistic for ``cm``; AUCs only when scores are given."""
    cmc = ConfusionMatrix(cm) if not isinstance(cm, ConfusionMatrix) else cm
    b = basic_metrics(cmc)
    flags = []
    if b.zero_prediction_classes:
        flags.append(f"precision set to 0 for never-predicted classes {b.zero_prediction_classes}")
    k, k_flag = kappa_detail(cmc)
    if k_flag:
        flags.append("kappa degenerate (p_e = 1)")
    m, m_flag = mcc_detail(cmc)
    if m_flag:
        flags.append("mcc denominator zero")
    try:
        p = chi_square_p(cmc).p
    except ValueError as exc:
        p = float("nan")
        flags.append(str(exc))
    if average == "weighted":
        counts = cmc.counts.astype(np.float64)
        sup = counts.sum(axis=1) / counts.sum()
        prec, rec, f1 = ((b.per_class_precision * sup).sum(), (b.per_class_recall * sup).sum(),
                         b.weighted_f1)
    elif average == "macro":
        prec, rec, f1 = b.precision, b.recall, b.f1
    else:
        raise ValueError(f"unknown averaging {average!r}")
    report = MetricsReport(b.accuracy, float(prec), float(rec), float(f1), k, m,
                           error_rate(cmc), p, flags=flags)
    if scores is not None and labels is not None:
        roc = roc_auc(scores, labels)
        report.auc = roc.per_class_auc
        report.micro_auc = roc.micro_auc
    return report


def roc_csv(curve: RocCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fpr", "tpr", "threshold"])
    for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
        w.writerow([f"{f:.10g}", f"{t:.10g}", "inf" if np.isinf(th) else f"{th:.10g}"])
    return buf.getvalue()

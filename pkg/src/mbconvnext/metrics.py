"""Confusion matrix, threshold metrics, ROC/AUC and report export.

Positive class is label 1 throughout; a sample is predicted positive when
``prob >= threshold``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import LengthMismatch, OneClassOnly


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    specificity: float
    degenerate: list = field(default_factory=list)  # names of metrics with an empty denominator


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _check(probs, labels):
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.size} probabilities vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return p, y.astype(np.int64)


def confusion(probs, labels, threshold=0.5) -> ConfusionMatrix:
    p, y = _check(probs, labels)
    pred = p >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)), fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)), tn=int(np.sum(~pred & ~pos)),
    )


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def classification_metrics(cm: ConfusionMatrix) -> Metrics:
    flags = []
    acc = _ratio(cm.tp + cm.tn, cm.total, "accuracy", flags)
    prec = _ratio(cm.tp, cm.tp + cm.fp, "precision", flags)
    rec = _ratio(cm.tp, cm.tp + cm.fn, "recall", flags)
    spec = _ratio(cm.tn, cm.tn + cm.fp, "specificity", flags)
    f1 = _ratio(2 * prec * rec, prec + rec, "f1", flags)
    return Metrics(acc, prec, rec, f1, spec, flags)


def _require_both(y):
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise OneClassOnly("need both classes present")
    return n_pos, y.size - n_pos


def roc_curve(probs, labels) -> RocCurve:
    """Threshold sweep from +inf down to -inf; tied scores form one point."""
    p, y = _check(probs, labels)
    n_pos, n_neg = _require_both(y)
    order = np.argsort(-p, kind="mergesort")
    ps, ys = p[order], y[order]
    # last index of each tie group in descending order
    ends = np.flatnonzero(np.r_[ps[1:] != ps[:-1], True])
    tp = np.cumsum(ys)[ends]
    fp = (ends + 1) - tp
    # the group holding the minimum score reaches (1,1); it is the -inf sentinel
    thr = np.r_[np.inf, ps[ends[:-1]], -np.inf]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return RocCurve(fpr, tpr, thr)


def auc_trapezoid(curve: RocCurve) -> float:
    f, t = curve.fpr, curve.tpr
    return float(np.sum((f[1:] - f[:-1]) * (t[1:] + t[:-1])) / 2.0)


def auc(probs, labels) -> float:
    return auc_trapezoid(roc_curve(probs, labels))


def auc_pairwise(probs, labels) -> float:
    """Mann-Whitney form: (#{pos > neg} + 0.5 #{ties}) / (n_pos n_neg)."""
    p, y = _check(probs, labels)
    n_pos, n_neg = _require_both(y)
    pos = np.sort(p[y == 1])
    neg = np.sort(p[y == 0])
    below = np.searchsorted(neg, pos, side="left")
    tied = np.searchsorted(neg, pos, side="right") - below
    return float((below.sum() + 0.5 * tied.sum()) / (n_pos * n_neg))


def bce(probs, labels, eps=1e-7) -> float:
    p, y = _check(probs, labels)
    p = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1.0 - p)))


def safe_auc(probs, labels) -> float:
    """AUC, or NaN when only one class is present (used for per-epoch logging)."""
    try:
        return auc(probs, labels)
    except OneClassOnly:
        return float("nan")


@dataclass
class MetricReport:
    loss: float
    auc: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    specificity: float
    threshold: float
    confusion: dict
    degenerate: list
    n: int


def make_report(probs, labels, threshold=0.5) -> MetricReport:
    p, y = _check(probs, labels)
    cm = confusion(p, y, threshold)
    m = classification_metrics(cm)
    return MetricReport(
        loss=bce(p, y), auc=safe_auc(p, y), accuracy=m.accuracy, precision=m.precision,
        recall=m.recall, f1=m.f1, specificity=m.specificity, threshold=float(threshold),
        confusion=asdict(cm), degenerate=m.degenerate, n=int(p.size),
    )


def _fmt(x):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def export_report(history, probs, labels, out_dir, threshold=0.5) -> MetricReport:
    """Write report.json, roc.csv, auc_evolution.csv and prob_dist.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p, y = _check(probs, labels)
    rep = make_report(p, y, threshold)
    with open(out / "report.json", "w") as fh:
        json.dump(asdict(rep), fh, indent=1, sort_keys=True)
        fh.write("\n")
    curve = roc_curve(p, y)
    with open(out / "roc.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
            wr.writerow([_fmt(f), _fmt(t), _fmt(th)])
    with open(out / "auc_evolution.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "phase", "train_auc", "val_auc"])
        for r in (history.records if history is not None else []):
            wr.writerow([r.epoch, r.phase, _fmt(r.train_auc), _fmt(r.val_auc)])
    with open(out / "prob_dist.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["label", "probability"])
        for lab, prob in zip(y, p):
            wr.writerow([int(lab), _fmt(prob)])
    return rep


def read_prob_dist(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([float(r["probability"]) for r in rows]),
            np.array([int(r["label"]) for r in rows], dtype=np.int64))

"""Pixel-level evaluation: AUROC, MAE, ACC and F1 with a best-F1 threshold sweep."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from ._validation import check_binary

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ("category", "AUROC", "MAE", "ACC", "F1", "threshold")


class UndefinedMetricError(ValueError):
    pass


@dataclass
class EvalReport:
    auroc: float
    mae: float
    acc: float
    f1: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    per_category: dict = field(default_factory=dict)

    @property
    def confusion(self) -> tuple[int, int, int, int]:
        return self.tp, self.fp, self.tn, self.fn

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_category"] = {k: (v.to_dict() if isinstance(v, EvalReport) else v)
                             for k, v in self.per_category.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["per_category"] = {k: cls.from_dict(v) for k, v in d.get("per_category", {}).items()}
        return cls(**d)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(random positive outranks random negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = check_binary(labels, "labels").ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    return float(np.abs(pred - truth).mean())


def binarize_and_confuse(pred, truth, threshold: float) -> tuple[int, int, int, int]:
    """Return ``(TP, FP, TN, FN)``; a pixel is predicted defective iff ``pred >= threshold``."""
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    pred = np.asarray(pred)
    truth = check_binary(truth, "truth").astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    positive = pred >= threshold
    tp = int(np.count_nonzero(positive & truth))
    fp = int(np.count_nonzero(positive & ~truth))
    fn = int(np.count_nonzero(~positive & truth))
    tn = int(truth.size - tp - fp - fn)
    return tp, fp, tn, fn


def accuracy(tp, fp, tn, fn) -> float:
    return (tp + tn) / (tp + fp + tn + fn)


def f1_score(tp, fp, tn, fn) -> float:
    den = 2 * tp + fp + fn
    return 2 * tp / den if den else 0.0


def candidate_thresholds(pooled: np.ndarray, num_thresholds: int) -> np.ndarray:
    """Ascending thresholds drawn from the pooled scores.

    When there are no more distinct scores than ``num_thresholds`` every distinct
    score is a candidate; otherwise ``num_thresholds`` equally spaced quantiles
    (taken as actual data values) are used.
    """
    uniq = np.unique(pooled)
    if uniq.size <= num_thresholds:
        return uniq
    q = np.quantile(pooled, np.linspace(0.0, 1.0, num_thresholds), method="lower")
    return np.unique(q)


def _pool(preds, truths):
    if len(preds) == 0 or len(preds) != len(truths):
        raise ValueError("need at least one (pred, truth) pair and equal list lengths")
    for p, t in zip(preds, truths):
        if np.shape(p) != np.shape(t):
            raise ValueError(f"pred shape {np.shape(p)} != truth shape {np.shape(t)}")
    scores = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in preds])
    labels = np.concatenate([check_binary(t, "truth").ravel() for t in truths]).astype(bool)
    return scores, labels


def best_f1_sweep(preds: Sequence, truths: Sequence, num_thresholds: int = 256) -> tuple[float, EvalReport]:
    """Pick the dataset-level threshold maximising pixel F1 and report all metrics there.

    Ties go to the lowest threshold. MAE uses the pooled min-max normalised map;
    AUROC is threshold-free (NaN when the ground truth holds a single class).
    """
    scores, labels = _pool(preds, truths)
    thresholds = candidate_thresholds(scores, num_thresholds)

    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    fn = pos.size - tp
    den = 2 * tp + fp + fn
    f1 = np.where(den > 0, 2 * tp / np.maximum(den, 1), 0.0)
    best = int(np.argmax(f1))
    threshold = float(thresholds[best])

    TP, FP, FN = int(tp[best]), int(fp[best]), int(fn[best])
    TN = int(labels.size - TP - FP - FN)

    lo, hi = scores.min(), scores.max()
    normalized = (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)
    try:
        auc = auroc(scores, labels)
    except UndefinedMetricError:
        auc = float("nan")
    report = EvalReport(
        auroc=auc,
        mae=mae(normalized, labels),
        acc=accuracy(TP, FP, TN, FN),
        f1=f1_score(TP, FP, TN, FN),
        threshold=threshold,
        tp=TP, fp=FP, tn=TN, fn=FN,
    )
    return threshold, report


def write_report_csv(reports: dict[str, EvalReport], path) -> None:
    """One row per category plus a ``mean`` row."""
    path = Path(path)
    rows = [(name, r.auroc, r.mae, r.acc, r.f1, r.threshold) for name, r in reports.items()]
    if rows:
        means = np.nanmean(np.array([row[1:5] for row in rows], dtype=np.float64), axis=0)
        rows.append(("mean", *means.tolist(), float("nan")))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])


def write_report_json(reports: dict[str, EvalReport], path) -> None:
    payload = {"schema_version": REPORT_SCHEMA_VERSION,
               "categories": {name: r.to_dict() for name, r in reports.items()}}
    Path(path).write_text(json.dumps(payload, indent=2, allow_nan=True))

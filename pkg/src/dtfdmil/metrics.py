"""Slide-level metrics: AUC, accuracy/F1 at a threshold, and cross-seed 95% intervals."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (pos, neg) pairs ranked correctly, ties worth one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes (n_pos={n_pos}, n_neg={n_neg})")
    r = _average_ranks(s)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) with prediction = score >= threshold."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(int)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return tp, fp, fn, tn


def acc_f1(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """Accuracy and F1 = TP / (TP + (FP + FN) / 2).

    With no positive labels and no positive predictions F1 is 0/0; it is
    reported as 1.0 and :func:`f1_degenerate` flags the case.
    """
    if len(np.asarray(scores).reshape(-1)) == 0:
        raise ValueError("no scores")
    tp, fp, fn, tn = confusion(scores, labels, threshold)
    acc = (tp + tn) / (tp + fp + fn + tn)
    denom = tp + 0.5 * (fp + fn)
    f1 = 1.0 if denom == 0 else tp / denom
    return float(acc), float(f1)


def f1_degenerate(scores, labels, threshold: float = 0.5) -> bool:
    tp, fp, fn, _ = confusion(scores, labels, threshold)
    return tp + fp + fn == 0


def ci95(values) -> tuple[float, float]:
    """Mean and normal-approximation half width 1.96 * sd / sqrt(n), sd with n - 1."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(v) < 2:
        raise ValueError(f"ci95 needs at least 2 values, got {len(v)}")
    # centering on v[0] first keeps identical inputs at exactly zero spread
    sd = float(np.std(v - v[0], ddof=1))
    return float(v.mean()), 1.96 * sd / math.sqrt(len(v))


@dataclass
class EvalReport:
    auc: float
    acc: float
    f1: float
    n_pos: int
    n_neg: int
    threshold: float = 0.5
    f1_degenerate: bool = False
    seeds: list[int] | None = None
    ci95: dict | None = field(default=None)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def evaluate(scores, labels, threshold: float = 0.5) -> EvalReport:
    y = np.asarray(labels).reshape(-1)
    a, f = acc_f1(scores, labels, threshold)
    return EvalReport(auc=auc(scores, labels), acc=a, f1=f,
                      n_pos=int((y == 1).sum()), n_neg=int((y == 0).sum()),
                      threshold=threshold, f1_degenerate=f1_degenerate(scores, labels, threshold))


def aggregate(reports: list[EvalReport], seeds: list[int]) -> EvalReport:
    """Combine per-seed reports into means with normal-approximation CI-95 half widths."""
    if len(reports) != len(seeds):
        raise ValueError("one report per seed expected")
    ci = {}
    means = {}
    for key in ("auc", "acc", "f1"):
        vals = [getattr(r, key) for r in reports]
        m, hw = ci95(vals)
        means[key] = m
        ci[key] = {"mean": m, "half_width": hw, "per_seed": vals, "method": "normal"}
    return EvalReport(auc=means["auc"], acc=means["acc"], f1=means["f1"],
                      n_pos=reports[0].n_pos, n_neg=reports[0].n_neg,
                      threshold=reports[0].threshold,
                      f1_degenerate=any(r.f1_degenerate for r in reports),
                      seeds=list(seeds), ci95=ci)

"""Binary classification metrics: F1, Jaccard, AUPRC (average precision), AUROC."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

CSV_COLUMNS = ("task", "variant", "f1", "jaccard", "auprc", "auroc")


@dataclass
class MetricsReport:
    f1: float
    jaccard: float
    auprc: float
    auroc: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float
    best_threshold: float | None = None
    f1_at_best: float | None = None
    jaccard_at_best: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self, task: str, variant: str) -> dict:
        return {"task": task, "variant": variant, "f1": f"{self.f1:.6f}",
                "jaccard": f"{self.jaccard:.6f}", "auprc": f"{self.auprc:.6f}",
                "auroc": f"{self.auroc:.6f}"}


def _binary(x, name):
    a = np.asarray(x)
    if a.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if a.size and not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be 0/1")
    return a.astype(np.int64)


def confusion(preds, labels) -> dict:
    p = _binary(preds, "preds")
    y = _binary(labels, "labels")
    if p.shape != y.shape or p.size == 0:
        raise ValueError("preds and labels must be nonempty and of equal length")
    return {
        "tp": int(((p == 1) & (y == 1)).sum()),
        "fp": int(((p == 1) & (y == 0)).sum()),
        "tn": int(((p == 0) & (y == 0)).sum()),
        "fn": int(((p == 0) & (y == 1)).sum()),
    }


def f1_jaccard_from_counts(tp, fp, fn):
    f1_den = 2 * tp + fp + fn
    j_den = tp + fp + fn
    return (2 * tp / f1_den if f1_den else 0.0), (tp / j_den if j_den else 0.0)


def f1_jaccard(preds, labels):
    c = confusion(preds, labels)
    f1, jac = f1_jaccard_from_counts(c["tp"], c["fp"], c["fn"])
    return f1, jac, c


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels, "labels")
    if s.shape != y.shape or s.size == 0:
        raise ValueError("scores and labels must be nonempty and of equal length")
    return s, y


def _average_ranks(s):
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    # boundaries of tie groups
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_s)) + 1]
    ends = np.r_[starts[1:], s.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    return ranks


def auroc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(tie), via the rank-sum statistic."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined AUROC: labels contain a single class")
    r = _average_ranks(s)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of (R_i - R_{i-1}) P_i."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("undefined AUPRC: no positive labels")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    tp = np.cumsum(y_sorted)[last_of_group]
    seen = last_of_group + 1
    precision = tp / seen
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(((recall - prev) * precision).sum())


def best_threshold(scores, labels) -> float:
    """Threshold maximizing F1 (ties resolved to the higher threshold)."""
    s, y = _scores_labels(scores, labels)
    best_t, best_f = 0.5, -1.0
    for t in sorted(set(s.tolist()), reverse=True):
        f, _, _ = f1_jaccard((s >= t).astype(int), y)
        if f > best_f:
            best_t, best_f = t, f
    return float(best_t)


def evaluate(probs, labels, threshold: float = 0.5, tuned_threshold: float | None = None) -> MetricsReport:
    s, y = _scores_labels(probs, labels)
    f1, jac, c = f1_jaccard((s >= threshold).astype(int), y)
    report = MetricsReport(f1=f1, jaccard=jac, auprc=auprc(s, y), auroc=auroc(s, y),
                           threshold=threshold, **c)
    if tuned_threshold is not None:
        bf, bj, _ = f1_jaccard((s >= tuned_threshold).astype(int), y)
        report.best_threshold = tuned_threshold
        report.f1_at_best = bf
        report.jaccard_at_best = bj
    return report


def write_csv(rows: list[dict], path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(CSV_COLUMNS) + sorted(
        {k for r in rows for k in r} - set(CSV_COLUMNS)), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text

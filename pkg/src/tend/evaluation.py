"""Threshold-free and threshold-selected detection metrics.

OOD is the positive class and a sample is predicted OOD iff ``S >= t``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import MetricError
from .samples import Label


class LabeledScore(NamedTuple):
    S: float
    truth: Label


class Threshold(NamedTuple):
    t: float
    tpr: float
    fpr: float
    diff: float


class Confusion(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int
    tpr: float
    fpr: float


def _arrays(scores: Iterable) -> tuple[np.ndarray, np.ndarray]:
    """Scores and OOD mask from LabeledScores or ScoreRecords."""
    s, y = [], []
    for item in scores:
        if isinstance(item, LabeledScore):
            s.append(item.S)
            y.append(item.truth)
        else:
            s.append(item.S)
            y.append(item.label)
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray([Label(v) is Label.OOD for v in y], dtype=bool)
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    return s, y


def _both_classes(y: np.ndarray):
    if y.all() or not y.any():
        raise MetricError("metric needs at least one ID and one OOD sample")


def auroc(scores) -> float:
    """P(S_ood > S_id) + 0.5 P(S_ood == S_id) via the rank-sum statistic."""
    s, y = _arrays(scores)
    _both_classes(y)
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    # midranks for tied runs
    _, first, counts = np.unique(sorted_s, return_index=True, return_counts=True)
    mid = first + (counts + 1) / 2.0
    ranks[order] = np.repeat(mid, counts)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(scores, t: float) -> Confusion:
    s, y = _arrays(scores)
    pred = s >= t
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    tpr = tp / (tp + fn) if tp + fn else math.nan
    fpr = fp / (fp + tn) if fp + tn else math.nan
    return Confusion(tp, fp, tn, fn, tpr, fpr)


def candidate_thresholds(s: np.ndarray) -> np.ndarray:
    u = np.unique(s)
    return np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])


def gmean_threshold(scores) -> Threshold:
    """Threshold maximizing sqrt(TPR * (1 - FPR)).

    Candidates are -inf, the midpoints between consecutive distinct scores,
    and +inf. Ties go to the larger TPR - FPR, then to the smaller threshold.
    Comparisons use integer counts, so ties are exact. A list whose scores
    are all equal returns t = +inf (everything predicted ID).
    """
    s, y = _arrays(scores)
    _both_classes(y)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    u = np.unique(s)
    if len(u) == 1:
        return Threshold(math.inf, 0.0, 0.0, 0.0)
    cands = candidate_thresholds(s)
    # counts of positives / negatives with score >= each candidate
    pos_sorted = np.sort(s[y])
    neg_sorted = np.sort(s[~y])
    tp = n_pos - np.searchsorted(pos_sorted, cands, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, cands, side="left")
    tn = n_neg - fp
    g2 = tp.astype(object) * tn.astype(object)          # proportional to G-Mean^2
    diff = tp.astype(object) * n_neg - fp.astype(object) * n_pos  # proportional to DIFF
    best = 0
    for i in range(1, len(cands)):
        if (g2[i], diff[i]) > (g2[best], diff[best]):
            best = i
    tpr = tp[best] / n_pos
    fpr = fp[best] / n_neg
    return Threshold(float(cands[best]), float(tpr), float(fpr), float(tpr - fpr))


def validation_accuracy(val_scores, t: float) -> float:
    """Fraction of generated-OOD samples with S >= t, i.e. TN / (TN + FP)."""
    s = np.asarray([r.S for r in val_scores], dtype=np.float64)
    if s.size == 0:
        raise MetricError("validation set is empty")
    tn = int(np.sum(s >= t))
    fp = int(s.size - tn)
    return tn / (tn + fp)


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    auroc: float
    threshold: float
    tpr: float
    fpr: float
    diff: float
    tp: int
    fp: int
    tn: int
    fn: int
    n: int
    per_transform_acc: dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"{k} = {v!r}" for k, v in [
            ("auroc", self.auroc), ("threshold", self.threshold), ("tpr", self.tpr),
            ("fpr", self.fpr), ("diff", self.diff), ("tp", self.tp), ("fp", self.fp),
            ("tn", self.tn), ("fn", self.fn), ("n", self.n)]]
        if self.per_transform_acc:
            lines.append("")
            lines.append("[acc_val]")
            lines += [f"{k} = {v!r}" for k, v in sorted(self.per_transform_acc.items())]
        return "\n".join(lines) + "\n"

    def table_row(self, dataset: str = "", mode: str = "", margin: float | str = "") -> dict:
        row = {"dataset": dataset, "mode": mode, "R": margin, "fpr": self.fpr, "tpr": self.tpr,
               "diff": self.diff, "auc": self.auroc, "threshold": self.threshold}
        for k, v in sorted(self.per_transform_acc.items()):
            row[f"acc_{k}"] = v
        return row


def table_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    fields: list[str] = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def evaluate(scores, val_sets: dict[str, list] | None = None) -> EvalReport:
    """AUROC, G-Mean operating point and (optionally) ACC_val per corruption."""
    auc = auroc(scores)
    th = gmean_threshold(scores)
    cm = confusion(scores, th.t)
    acc = {kind: validation_accuracy(v, th.t) for kind, v in (val_sets or {}).items()}
    return EvalReport(auc, th.t, th.tpr, th.fpr, th.diff, cm.tp, cm.fp, cm.tn, cm.fn,
                      cm.tp + cm.fp + cm.tn + cm.fn, acc)

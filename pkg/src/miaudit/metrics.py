"""Confusion-derived attack metrics with the member class as positive.

Rates whose denominator is empty are ``None`` (rendered as "-" in reports)
rather than 0.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

UNDEFINED = None

RATE_FIELDS = ("accuracy", "balanced_accuracy", "far", "precision_pos", "recall_pos",
               "precision_neg", "recall_neg", "f1_pos")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class AttackReport:
    accuracy: float | None
    balanced_accuracy: float | None
    far: float | None
    precision_pos: float | None
    recall_pos: float | None
    precision_neg: float | None
    recall_neg: float | None
    f1_pos: float | None
    support_pos: int
    support_neg: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        return cls(**{f.name: d[f.name] for f in fields(cls)})


def confusion(predictions, labels) -> ConfusionCounts:
    p = np.asarray(predictions).astype(bool).ravel()
    t = np.asarray(labels).astype(bool).ravel()
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions for {t.size} labels")
    if p.size == 0:
        raise ValueError("confusion of an empty evaluation set")
    return ConfusionCounts(tp=int(np.sum(p & t)), fp=int(np.sum(p & ~t)),
                           tn=int(np.sum(~p & ~t)), fn=int(np.sum(~p & t)))


def _ratio(num, den):
    return num / den if den else UNDEFINED


def report_from_confusion(c: ConfusionCounts) -> AttackReport:
    recall_pos = _ratio(c.tp, c.tp + c.fn)
    recall_neg = _ratio(c.tn, c.tn + c.fp)
    precision_pos = _ratio(c.tp, c.tp + c.fp)
    if recall_pos is None or recall_neg is None:
        balanced = UNDEFINED
    else:
        balanced = (recall_pos + recall_neg) / 2
    if precision_pos is None or recall_pos is None or precision_pos + recall_pos == 0:
        f1 = UNDEFINED
    else:
        f1 = 2 * precision_pos * recall_pos / (precision_pos + recall_pos)
    return AttackReport(
        accuracy=_ratio(c.tp + c.tn, c.total),
        balanced_accuracy=balanced,
        far=_ratio(c.fp, c.fp + c.tn),
        precision_pos=precision_pos,
        recall_pos=recall_pos,
        precision_neg=_ratio(c.tn, c.tn + c.fn),
        recall_neg=recall_neg,
        f1_pos=f1,
        support_pos=c.tp + c.fn,
        support_neg=c.tn + c.fp,
    )


def evaluate(predictions, labels) -> AttackReport:
    return report_from_confusion(confusion(predictions, labels))


def precision_at_ratio(tpr: float, fpr: float, r: float) -> float:
    """Member precision projected to an evaluation set with r members per nonmember."""
    if not (0 <= tpr <= 1 and 0 <= fpr <= 1):
        raise ValueError("tpr and fpr must lie in [0, 1]")
    if r <= 0:
        raise ValueError("ratio must be positive")
    den = r * tpr + fpr
    if den == 0:
        raise ZeroDivisionError("r*tpr + fpr is zero; precision is undefined")
    return r * tpr / den


def accuracy_at_ratio(tpr: float, fpr: float, r: float) -> float:
    if r <= 0:
        raise ValueError("ratio must be positive")
    return (r * tpr + (1 - fpr)) / (r + 1)


def ratio_counts(n_pos: int, n_neg: int, r: float) -> tuple[int, int]:
    """Largest (members, nonmembers) at ratio r obtainable by downsampling."""
    if r <= 0:
        raise ValueError("ratio must be positive")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both membership classes must be present")
    if n_pos >= r * n_neg:
        pos, neg = int(round(r * n_neg)), n_neg
    else:
        pos, neg = n_pos, int(round(n_pos / r))
    pos, neg = min(pos, n_pos), min(neg, n_neg)
    if pos < 1 or neg < 1:
        raise ValueError(f"ratio {r} is not achievable from ({n_pos}, {n_neg}) by downsampling")
    return pos, neg


def resample_indices(is_member, r: float, seed: int = 0) -> np.ndarray:
    """Indices of a random subset whose member:nonmember ratio is r (sorted)."""
    is_member = np.asarray(is_member, dtype=bool)
    pos_idx, neg_idx = np.flatnonzero(is_member), np.flatnonzero(~is_member)
    n_pos, n_neg = ratio_counts(len(pos_idx), len(neg_idx), r)
    rng = np.random.default_rng(seed)
    keep = np.concatenate([rng.choice(pos_idx, n_pos, replace=False),
                           rng.choice(neg_idx, n_neg, replace=False)])
    return np.sort(keep)


def aggregate_mean_std(reports) -> dict:
    """Unweighted mean and population std of each rate across reports.

    Undefined cells are left out of a field's statistics; a field with no
    defined value aggregates to ``None``. Supports are summed.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    out = {"n": len(reports)}
    for name in RATE_FIELDS:
        vals = np.array([getattr(r, name) for r in reports if getattr(r, name) is not None], float)
        out[name] = {"mean": float(vals.mean()), "std": float(vals.std())} if vals.size else None
    out["support_pos"] = int(sum(r.support_pos for r in reports))
    out["support_neg"] = int(sum(r.support_neg for r in reports))
    return out


def threshold_sweep(scores, labels, thresholds=None) -> list[dict]:
    """Accuracy / balanced accuracy / FAR as the decision threshold moves."""
    scores = np.asarray(scores, dtype=float)
    if thresholds is None:
        thresholds = np.linspace(0.05, 0.95, 19)
    rows = []
    for th in thresholds:
        rep = evaluate(scores >= th, labels)
        rows.append({"threshold": float(th), "accuracy": rep.accuracy,
                     "balanced_accuracy": rep.balanced_accuracy, "far": rep.far,
                     "recall_pos": rep.recall_pos})
    return rows


def resample_eval_ratio(records, r: float, seed: int = 0):
    """Downsample the larger membership side of ``records`` to reach ratio r."""
    return records.subset(resample_indices(records.is_member, r, seed))

"""Membership datasets, attack learners and the ZeroR / naive baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import joblib
import numpy as np
from scipy import stats
from sklearn.ensemble import HistGradientBoostingClassifier, RandomForestClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import RandomizedSearchCV, StratifiedKFold
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from . import metrics
from .gateway.data import LabeledDataset
from .gateway.target import TargetModel
from .probes import OK, FeatureCache, ProbeSpec, extract

log = logging.getLogger(__name__)

LEARNERS = ("logistic", "fcnn_128_64", "random_forest", "gbdt")
ALL = "ALL"


@dataclass
class MembershipRecord:
    sample_id: str
    features: dict
    is_member: bool
    true_class: int
    predicted_class: int
    is_correct: bool


@dataclass
class MembershipRecords:
    """Column-oriented collection of membership records for one probe family."""

    features: np.ndarray
    columns: list
    is_member: np.ndarray
    true_class: np.ndarray
    predicted_class: np.ndarray
    sample_id: np.ndarray
    family: str = "confidence"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        self.is_member = np.asarray(self.is_member, dtype=bool)
        self.true_class = np.asarray(self.true_class, dtype=np.int64)
        self.predicted_class = np.asarray(self.predicted_class, dtype=np.int64)
        self.sample_id = np.asarray(self.sample_id).astype(str)
        n = len(self.features)
        for name in ("is_member", "true_class", "predicted_class", "sample_id"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, features have {n}")
        if len(self.columns) != self.features.shape[1]:
            raise ValueError("column names do not match feature width")

    @property
    def is_correct(self) -> np.ndarray:
        return self.true_class == self.predicted_class

    def __len__(self):
        return len(self.features)

    def __getitem__(self, i) -> MembershipRecord:
        return MembershipRecord(str(self.sample_id[i]), dict(zip(self.columns, self.features[i])),
                                bool(self.is_member[i]), int(self.true_class[i]),
                                int(self.predicted_class[i]), bool(self.is_correct[i]))

    def subset(self, index) -> "MembershipRecords":
        return MembershipRecords(self.features[index], list(self.columns), self.is_member[index],
                                 self.true_class[index], self.predicted_class[index],
                                 self.sample_id[index], self.family)

    def counts(self) -> tuple[int, int]:
        return int(self.is_member.sum()), int((~self.is_member).sum())

    @classmethod
    def concat(cls, parts) -> "MembershipRecords":
        parts = list(parts)
        return cls(np.concatenate([p.features for p in parts]), list(parts[0].columns),
                   np.concatenate([p.is_member for p in parts]),
                   np.concatenate([p.true_class for p in parts]),
                   np.concatenate([p.predicted_class for p in parts]),
                   np.concatenate([p.sample_id for p in parts]), parts[0].family)


@dataclass
class Provenance:
    probe: str
    n_members: int = 0
    n_nonmembers: int = 0
    failures: dict = field(default_factory=dict)

    @property
    def n_failed(self) -> int:
        return sum(self.failures.values())


def assemble(model: TargetModel, members: LabeledDataset, nonmembers: LabeledDataset,
             probe: ProbeSpec, cache: FeatureCache | None = None, ckpt_hash: str | None = None):
    """Query the target for every sample and build the membership dataset.

    Rows whose probe failed are dropped; their statuses are counted in the
    returned provenance. Returns ``(records, provenance)``.
    """
    overlap = np.intersect1d(members.ids, nonmembers.ids)
    if overlap.size:
        raise ValueError(f"{overlap.size} sample ids appear as both member and nonmember, "
                         f"e.g. {overlap[0]!r}")
    parts = []
    prov = Provenance(probe=probe.family)
    for ds, flag, split in ((members, True, "member"), (nonmembers, False, "nonmember")):
        cached = cache.load(ckpt_hash, probe, split) if cache and ckpt_hash else None
        if cached is not None and np.array_equal(cached[3], ds.ids):
            feats, cols, status, _ = cached
        else:
            feats, cols, status = extract(model, ds.inputs, ds.labels, probe)
            if cache and ckpt_hash:
                cache.save(ckpt_hash, probe, split, feats, cols, status, ds.ids)
        pred = model.predict(ds.inputs)
        ok = status == OK
        for s in np.unique(status[~ok]):
            prov.failures[str(s)] = prov.failures.get(str(s), 0) + int(np.sum(status == s))
        parts.append(MembershipRecords(feats[ok], cols, np.full(ok.sum(), flag), ds.labels[ok],
                                       pred[ok], ds.ids[ok], probe.family))
    records = MembershipRecords.concat(parts)
    prov.n_members, prov.n_nonmembers = records.counts()
    if prov.n_failed:
        log.info("%s probe: dropped %d failed samples %s", probe.family, prov.n_failed, prov.failures)
    return records, prov


def split_by_correctness(records: MembershipRecords):
    ok = records.is_correct
    return records.subset(np.flatnonzero(ok)), records.subset(np.flatnonzero(~ok))


@dataclass(frozen=True)
class SplitPlan:
    known_fraction: float = 0.8
    seed: int = 0
    rebalance: str = "none"

    def __post_init__(self):
        if not 0 < self.known_fraction < 1:
            raise ValueError("known_fraction must be in (0, 1)")
        if self.rebalance not in ("none", "undersample_member", "oversample_nonmember"):
            raise ValueError(f"unknown rebalance mode {self.rebalance!r}")


def _stratified_take(index: np.ndarray, groups: np.ndarray, n_take: int, rng) -> np.ndarray:
    """Pick n_take of ``index`` with per-group shares proportional to group size."""
    keys, sizes = np.unique(groups, return_counts=True)
    quota = sizes * n_take / sizes.sum()
    base = np.floor(quota).astype(int)
    short = n_take - base.sum()
    if short:
        order = np.lexsort((rng.random(len(keys)), -(quota - base)))
        base[order[:short]] += 1
    chosen = []
    for key, k in zip(keys, base):
        members = index[groups == key]
        chosen.append(rng.choice(members, size=k, replace=False))
    return np.concatenate(chosen) if chosen else np.zeros(0, int)


def partition_known_unknown(records: MembershipRecords, plan: SplitPlan = SplitPlan()):
    """Split into the attacker's known (training) and unknown (evaluation) parts.

    Stratified by membership and, within each side, by true class. The
    evaluation part keeps the natural member:nonmember ratio; only the training
    part is rebalanced.
    """
    rng = np.random.default_rng(plan.seed)
    train_idx, eval_idx = [], []
    for side in (True, False):
        idx = np.flatnonzero(records.is_member == side)
        if idx.size == 0:
            raise ValueError(f"no {'member' if side else 'nonmember'} records to split")
        n_known = int(np.floor(idx.size * plan.known_fraction + 0.5))
        known = _stratified_take(idx, records.true_class[idx], n_known, rng)
        train_idx.append(np.sort(known))
        eval_idx.append(np.setdiff1d(idx, known))
    pos, neg = train_idx
    if plan.rebalance == "undersample_member" and len(pos) > len(neg):
        pos = np.sort(rng.choice(pos, size=len(neg), replace=False))
    elif plan.rebalance == "oversample_nonmember" and len(neg) < len(pos):
        neg = np.concatenate([neg, rng.choice(neg, size=len(pos) - len(neg), replace=True)])
    return records.subset(np.concatenate([pos, neg])), records.subset(np.concatenate(eval_idx))


# -- learners ----------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpec:
    """Random hyper-parameter search for the tree learners."""

    n_iter: int = 30
    cv: int = 3
    max_depth: tuple = (2, 16)
    n_estimators: tuple = (50, 500)
    learning_rate: tuple = (0.01, 0.3)


def _base_estimator(kind: str, seed: int):
    if kind == "logistic":
        return make_pipeline(StandardScaler(), LogisticRegression(max_iter=1000))
    if kind == "fcnn_128_64":
        return make_pipeline(StandardScaler(), MLPClassifier(
            hidden_layer_sizes=(128, 64), max_iter=300, early_stopping=True,
            n_iter_no_change=10, random_state=seed))
    if kind == "random_forest":
        return RandomForestClassifier(random_state=seed, n_jobs=1)
    if kind == "gbdt":
        return HistGradientBoostingClassifier(random_state=seed)
    raise ValueError(f"unknown learner {kind!r}; expected one of {LEARNERS}")


def _search_space(kind: str, search: SearchSpec) -> dict:
    d_lo, d_hi = search.max_depth
    e_lo, e_hi = search.n_estimators
    if kind == "random_forest":
        return {"max_depth": stats.randint(d_lo, d_hi + 1),
                "n_estimators": stats.randint(e_lo, e_hi + 1),
                "min_samples_leaf": stats.randint(1, 11),
                "max_features": ["sqrt", "log2", None]}
    return {"max_depth": stats.randint(d_lo, d_hi + 1),
            "max_iter": stats.randint(e_lo, e_hi + 1),
            "learning_rate": stats.loguniform(*search.learning_rate),
            "min_samples_leaf": stats.randint(5, 41)}


@dataclass
class AttackModel:
    learner_kind: str
    estimator: object
    class_scope: object = ALL
    decision_threshold: float = 0.5
    feature_family: str = "confidence"
    seed: int = 0
    hyperparameters: dict = field(default_factory=dict)

    def predict_proba(self, features) -> np.ndarray:
        return self.estimator.predict_proba(np.asarray(features, dtype=np.float64))[:, 1]

    def predict(self, features) -> np.ndarray:
        return self.predict_proba(features) >= self.decision_threshold

    def evaluate(self, records: MembershipRecords) -> metrics.AttackReport:
        return metrics.evaluate(self.predict(records.features), records.is_member)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        joblib.dump({"learner_kind": self.learner_kind, "class_scope": self.class_scope,
                     "decision_threshold": self.decision_threshold,
                     "feature_family": self.feature_family, "seed": self.seed,
                     "hyperparameters": self.hyperparameters, "estimator": self.estimator}, path)
        return path

    @classmethod
    def load(cls, path) -> "AttackModel":
        return cls(**joblib.load(path))


def train_attack(records: MembershipRecords, learner_kind: str, search: SearchSpec | None = None,
                 seed: int = 0, class_scope=ALL, decision_threshold: float = 0.5) -> AttackModel:
    """Fit one attack learner on a single-family membership dataset."""
    if len(records) == 0:
        raise ValueError("no records to train on")
    if np.unique(records.is_member).size < 2:
        raise ValueError("attack training set contains a single membership class")
    if not np.all(np.isfinite(records.features)):
        raise ValueError("attack features contain non-finite values")
    x, y = records.features, records.is_member.astype(int)
    est = _base_estimator(learner_kind, seed)
    hyper = {}
    if learner_kind in ("random_forest", "gbdt"):
        search = search or SearchSpec()
        n_splits = min(search.cv, int(np.bincount(y).min()))
        if n_splits >= 2 and search.n_iter > 0:
            rs = RandomizedSearchCV(est, _search_space(learner_kind, search), n_iter=search.n_iter,
                                    cv=StratifiedKFold(n_splits, shuffle=True, random_state=seed),
                                    scoring="balanced_accuracy", random_state=seed, n_jobs=1)
            rs.fit(x, y)
            est, hyper = rs.best_estimator_, dict(rs.best_params_)
        else:
            est.fit(x, y)
    else:
        est.fit(x, y)
    hyper = {k: (v.item() if hasattr(v, "item") else v) for k, v in hyper.items()}
    return AttackModel(learner_kind, est, class_scope, decision_threshold, records.family, seed, hyper)


# -- baselines ---------------------------------------------------------------


def zero_r(records: MembershipRecords) -> np.ndarray:
    """Predict member for every record."""
    return np.ones(len(records), dtype=bool)


def naive_attack(records: MembershipRecords) -> np.ndarray:
    """Predict member exactly when the target classifies the record correctly."""
    return records.is_correct.copy()


# -- per-class attacks -------------------------------------------------------


@dataclass
class PerClassResult:
    models: dict
    reports: dict
    skipped: dict
    aggregate: dict | None
    splits: dict = field(default_factory=dict)
    eval_records: dict = field(default_factory=dict)


def per_class_attack(records: MembershipRecords, learner_kind: str, plan: SplitPlan = SplitPlan(),
                     search: SearchSpec | None = None, seed: int = 0, min_samples: int = 30,
                     group_by: str = "true_class", classes=None, raise_if_empty: bool = True
                     ) -> PerClassResult:
    """Train and evaluate one attack model per class.

    Classes with fewer than ``min_samples`` members or nonmembers are skipped
    with a reason. The aggregate is the unweighted mean and population std of
    the per-class reports.
    """
    if group_by not in ("true_class", "predicted_class"):
        raise ValueError("group_by must be 'true_class' or 'predicted_class'")
    keys = getattr(records, group_by)
    if classes is None:
        classes = np.unique(keys)
    models, reports, skipped, splits, evals = {}, {}, {}, {}, {}
    for c in classes:
        c = int(c)
        sub = records.subset(np.flatnonzero(keys == c))
        n_pos, n_neg = sub.counts()
        if n_pos < min_samples or n_neg < min_samples:
            skipped[c] = f"{n_pos} members / {n_neg} nonmembers < min_samples={min_samples}"
            log.info("class %d skipped: %s", c, skipped[c])
            continue
        train, ev = partition_known_unknown(sub, SplitPlan(plan.known_fraction, plan.seed + c,
                                                           plan.rebalance))
        model = train_attack(train, learner_kind, search, seed, class_scope=c)
        models[c] = model
        reports[c] = model.evaluate(ev)
        splits[c] = {"train": train.counts(), "eval": ev.counts()}
        evals[c] = ev
    if not reports and raise_if_empty:
        raise ValueError(f"no class has at least {min_samples} samples per membership side")
    aggregate = metrics.aggregate_mean_std(reports.values()) if reports else None
    return PerClassResult(models, reports, skipped, aggregate, splits, evals)

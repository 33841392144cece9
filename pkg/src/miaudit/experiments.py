"""Experiment grid: probe family x data subset x class, plus sweeps and trajectories."""
from __future__ import annotations

import json
import logging
import os
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .attacks import (ALL, AttackModel, MembershipRecords, SplitPlan, assemble, naive_attack,
                      partition_known_unknown, per_class_attack, split_by_correctness,
                      train_attack, zero_r)
from .config import ExperimentConfig
from .gateway import data as gdata
from .gateway.target import TargetModel
from .gateway.training import (checkpoint_hash, evaluate_target, list_checkpoints,
                               load_checkpoint, train_target)
from .probes import FeatureCache, ProbeSpec

log = logging.getLogger(__name__)

SUBSETS = ("all", "correct", "misclassified")
BUNDLE_SCHEMA = "miaudit-bundle/1"


def runs_root(root=None) -> Path:
    return Path(root or os.environ.get("MIAUDIT_RUNS", "runs"))


# -- data and target ---------------------------------------------------------


def prepare_data(cfg: ExperimentConfig):
    """Member and nonmember pools described by the data section."""
    d = cfg.data
    if d.kind == "mnist":
        members, nonmembers = gdata.load_mnist(d.mnist_dir)
        members = gdata.sample(members, d.n_members, d.seed)
        nonmembers = gdata.sample(nonmembers, d.n_nonmembers, d.seed + 1)
        n_classes = 10
    else:
        n_m = d.n_members or d.n_samples // 2
        n_n = d.n_nonmembers or d.n_samples - n_m
        pool = gdata.gaussian_blobs(max(d.n_samples, n_m + n_n), d.n_classes, d.dim,
                                    d.cluster_std, d.seed)
        if d.random_labels:
            rng = np.random.default_rng(d.seed + 7)
            pool = gdata.LabeledDataset(pool.inputs, rng.integers(0, d.n_classes, len(pool)),
                                        pool.split_tag, pool.ids)
        members, nonmembers = gdata.split_pool(pool, n_m, n_n, d.seed)
        n_classes = d.n_classes
    if d.label_noise:
        members = gdata.with_label_noise(members, d.label_noise, n_classes, d.seed + 11)
        nonmembers = gdata.with_label_noise(nonmembers, d.label_noise, n_classes, d.seed + 12)
    return members, nonmembers, n_classes


def target_dir(cfg: ExperimentConfig, root=None) -> Path:
    return runs_root(root) / "targets" / cfg.target_hash()


def prepare_target(cfg: ExperimentConfig, members, nonmembers, n_classes, root=None):
    """Load the configured checkpoint, reuse a previous training run, or train.

    Returns ``(model, checkpoint_paths)``.
    """
    if cfg.target.checkpoint:
        path = Path(cfg.target.checkpoint)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} does not exist")
        return load_checkpoint(path), [path]
    tdir = target_dir(cfg, root)
    done = tdir / "complete.json"
    if done.exists():
        paths = list_checkpoints(tdir / "checkpoints")
        return load_checkpoint(paths[-1]), paths
    model, paths = train_target(cfg.target.arch, members, cfg.target.train_config(), nonmembers,
                                tdir / "checkpoints", n_classes=n_classes)
    done.write_text(json.dumps({"checkpoint_hash": checkpoint_hash(model),
                                "checkpoints": [p.name for p in paths]}, indent=2))
    return model, paths


# -- bundle types ------------------------------------------------------------


@dataclass
class Cell:
    probe: str
    subset: str
    class_scope: object
    learner: str
    report: dict | None = None
    aggregate: dict | None = None
    report_1to1: dict | None = None
    skip_reason: str | None = None
    partition: dict | None = None
    is_best: bool = False


@dataclass
class ResultsBundle:
    config: dict
    config_hash: str
    target: dict
    cells: list = field(default_factory=list)
    baselines: list = field(default_factory=list)
    feature_summaries: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    histograms: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    schema: str = BUNDLE_SCHEMA

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultsBundle":
        d = dict(d)
        d["cells"] = [Cell(**c) for c in d.get("cells", [])]
        d["baselines"] = [Cell(**c) for c in d.get("baselines", [])]
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_jsonable))
        return path

    @classmethod
    def load(cls, path) -> "ResultsBundle":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def select(self, probe=None, subset=None, class_scope=None, learner=None) -> list[Cell]:
        return [c for c in self.cells
                if (probe is None or c.probe == probe) and (subset is None or c.subset == subset)
                and (class_scope is None or c.class_scope == class_scope)
                and (learner is None or c.learner == learner)]


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


# -- feature summaries -------------------------------------------------------


def summary_scalar(records: MembershipRecords) -> np.ndarray:
    """One scalar per record used for the member-vs-nonmember summary columns."""
    fam = records.family
    if fam == "confidence":
        return records.features[np.arange(len(records)), records.true_class]
    if fam in ("grad_w", "grad_x"):
        return records.features[:, records.columns.index(f"{fam}_l2")]
    if fam == "distance":
        return records.features[:, 0]
    return np.sqrt(np.sum(records.features ** 2, axis=1))


def summarize(records: MembershipRecords) -> dict:
    vals = summary_scalar(records)
    out = {}
    for side, mask in (("member", records.is_member), ("nonmember", ~records.is_member)):
        v = vals[mask]
        out[side] = {"mean": float(v.mean()) if v.size else None,
                     "std": float(v.std()) if v.size else None, "n": int(v.size)}
    return out


def subset_records(records: MembershipRecords, subset: str) -> MembershipRecords:
    if subset == "all":
        return records
    correct, wrong = split_by_correctness(records)
    return correct if subset == "correct" else wrong


# -- grid --------------------------------------------------------------------


def attack_cells(records: MembershipRecords, subset: str, learner: str, cfg: ExperimentConfig,
                 classes) -> list[Cell]:
    """Per-class cells plus one aggregate cell for a (probe, subset, learner)."""
    a = cfg.attack
    res = per_class_attack(records, learner, a.plan(), a.search(), a.seed, a.min_samples,
                           a.group_by, classes=classes, raise_if_empty=False)
    cells = []
    for c in classes:
        c = int(c)
        if c in res.reports:
            ev = res.eval_records[c]
            try:
                balanced = res.models[c].evaluate(metrics.resample_eval_ratio(ev, 1.0, a.seed + c))
                balanced = balanced.to_dict()
            except ValueError:
                balanced = None
            cells.append(Cell(records.family, subset, c, learner, res.reports[c].to_dict(),
                              report_1to1=balanced,
                              partition={k: list(v) for k, v in res.splits[c].items()}))
        else:
            cells.append(Cell(records.family, subset, c, learner, skip_reason=res.skipped[c]))
    if res.aggregate is None:
        cells.append(Cell(records.family, subset, ALL, learner,
                          skip_reason=f"no class with >= {a.min_samples} samples per membership side"))
    else:
        cells.append(Cell(records.family, subset, ALL, learner, aggregate=res.aggregate))
    return cells


def mark_best(cells: list[Cell]) -> None:
    """Flag the learner with the highest mean balanced accuracy per (probe, subset)."""
    groups = {}
    for c in cells:
        if c.class_scope == ALL and c.aggregate and c.aggregate.get("balanced_accuracy"):
            key = (c.probe, c.subset)
            score = c.aggregate["balanced_accuracy"]["mean"]
            if key not in groups or score > groups[key][0]:
                groups[key] = (score, c)
    for _, cell in groups.values():
        cell.is_best = True


def baseline_cells(model: TargetModel, members, nonmembers) -> list[Cell]:
    pred = np.concatenate([model.predict(members.inputs), model.predict(nonmembers.inputs)])
    labels = np.concatenate([members.labels, nonmembers.labels])
    is_member = np.concatenate([np.ones(len(members), bool), np.zeros(len(nonmembers), bool)])
    recs = MembershipRecords(np.zeros((len(labels), 1)), ["none"], is_member, labels, pred,
                             np.concatenate([members.ids, nonmembers.ids]), "none")
    part = {"eval": [len(members), len(nonmembers)]}
    return [Cell("none", "all", ALL, name, metrics.evaluate(fn(recs), is_member).to_dict(),
                 partition=part)
            for name, fn in (("zero_r", zero_r), ("naive", naive_attack))]


def run_full_evaluation(cfg: ExperimentConfig, root=None, model: TargetModel | None = None,
                        data=None) -> ResultsBundle:
    """Run the configured grid and persist the bundle under ``<runs>/<config hash>/``.

    Stage failures are recorded in ``bundle.errors``; finished cells are kept.
    """
    t0 = time.time()
    root = runs_root(root)
    run_dir = root / cfg.config_hash()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True))
    members, nonmembers, n_classes = data or prepare_data(cfg)
    if model is None:
        model, paths = prepare_target(cfg, members, nonmembers, n_classes, root)
    else:
        paths = []
    ckpt = checkpoint_hash(model)
    acc = evaluate_target(model, members, nonmembers)
    bundle = ResultsBundle(
        config=cfg.model_dump(mode="json"), config_hash=cfg.config_hash(),
        target={"architecture_id": model.architecture_id, "epoch": model.epoch,
                "checkpoint_hash": ckpt, "train_accuracy": acc["train_accuracy"],
                "test_accuracy": acc["test_accuracy"],
                "generalization_gap": acc["train_accuracy"] - acc["test_accuracy"],
                "checkpoint_dir": str(paths[-1].parent) if paths else None,
                "n_checkpoints": len(paths)},
        provenance={"config_hash": cfg.config_hash(), "probe_failures": {}, "n_classes": n_classes,
                    "n_members": len(members), "n_nonmembers": len(nonmembers)})
    bundle.baselines = baseline_cells(model, members, nonmembers)
    cache = FeatureCache(root / "cache")
    classes = list(range(n_classes))
    sweep_saved = False
    for probe_cfg in cfg.probes:
        probe = probe_cfg.spec()
        try:
            m = gdata.sample(members, probe_cfg.max_samples, cfg.data.seed + 101)
            n = gdata.sample(nonmembers, probe_cfg.max_samples, cfg.data.seed + 102)
            records, prov = assemble(model, m, n, probe, cache, ckpt)
        except Exception as exc:
            bundle.errors.append({"stage": f"extract:{probe.family}", "error": repr(exc),
                                  "trace": traceback.format_exc(limit=3)})
            continue
        bundle.provenance["probe_failures"][probe.family] = {
            "failed": prov.n_failed, "by_status": prov.failures,
            "n_members": prov.n_members, "n_nonmembers": prov.n_nonmembers}
        bundle.feature_summaries[probe.family] = {
            s: summarize(subset_records(records, s)) for s in SUBSETS}
        if probe.kind == "confidence" and not bundle.histograms:
            bundle.histograms = [confidence_distribution(records, c, s, cfg.evaluation.histogram_bins)
                                 for c in classes for s in SUBSETS]
        for subset in SUBSETS:
            recs = subset_records(records, subset)
            for learner in cfg.attack.learners:
                try:
                    bundle.cells.extend(attack_cells(recs, subset, learner, cfg, classes))
                except Exception as exc:
                    bundle.errors.append({"stage": f"attack:{probe.family}:{subset}:{learner}",
                                          "error": repr(exc), "trace": traceback.format_exc(limit=3)})
        if not sweep_saved:
            try:
                save_sweep_artifacts(records, cfg, run_dir / "sweep")
                sweep_saved = True
            except Exception as exc:
                bundle.errors.append({"stage": "sweep-artifacts", "error": repr(exc)})
    mark_best(bundle.cells)
    bundle.provenance["skipped"] = [
        {"probe": c.probe, "subset": c.subset, "class_scope": c.class_scope, "learner": c.learner,
         "reason": c.skip_reason} for c in bundle.cells if c.skip_reason]
    bundle.provenance["elapsed_seconds"] = round(time.time() - t0, 1)
    bundle.save(run_dir / "bundle.json")
    with open(root / "index.jsonl", "a") as fh:
        fh.write(json.dumps({"config_hash": cfg.config_hash(), "name": cfg.name,
                             "checkpoint_hash": ckpt, "run_dir": str(run_dir)}) + "\n")
    return bundle


# -- imbalance sweep ---------------------------------------------------------


def save_sweep_artifacts(records: MembershipRecords, cfg: ExperimentConfig, out_dir) -> Path:
    """Fit one pooled attack (all classes) and keep its evaluation records for sweeps."""
    out_dir = Path(out_dir)
    train, ev = partition_known_unknown(records, cfg.attack.plan())
    model = train_attack(train, cfg.attack.learners[0], cfg.attack.search(), cfg.attack.seed)
    model.save(out_dir / "attack.joblib")
    save_records(ev, out_dir / "eval_records.npz")
    return out_dir


def save_records(records: MembershipRecords, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, features=records.features, columns=np.array(records.columns),
             is_member=records.is_member, true_class=records.true_class,
             predicted_class=records.predicted_class, sample_id=records.sample_id,
             family=np.array(records.family))
    return path


def load_records(path) -> MembershipRecords:
    with np.load(path, allow_pickle=False) as z:
        return MembershipRecords(z["features"], [str(c) for c in z["columns"]], z["is_member"],
                                 z["true_class"], z["predicted_class"], z["sample_id"],
                                 str(z["family"]))


SWEEP_FIELDS = ("precision_pos", "recall_pos", "precision_neg", "recall_neg",
                "balanced_accuracy", "far", "accuracy")


def imbalance_sweep(model: AttackModel, records: MembershipRecords, ratios=(5.0, 1.0, 0.2),
                    n_resamples: int = 50, seed: int = 0) -> list[dict]:
    """Attack and ZeroR rows at each member:nonmember evaluation ratio.

    MI rows average ``n_resamples`` random downsamplings of ``records``; each
    row also carries the precision projected from the full-set TPR/FPR.
    """
    base = model.evaluate(records)
    pred_all = model.predict(records.features)
    rows = []
    for r in ratios:
        per_draw = []
        zr = None
        for k in range(n_resamples):
            idx = metrics.resample_indices(records.is_member, r, seed + k)
            labels = records.is_member[idx]
            per_draw.append(metrics.evaluate(pred_all[idx], labels))
            if zr is None:
                zr = metrics.evaluate(np.ones(len(idx), bool), labels)
        mi = {"ratio": r, "attack": "MI attack", "n_resamples": n_resamples,
              "support_pos": per_draw[0].support_pos, "support_neg": per_draw[0].support_neg}
        for f in SWEEP_FIELDS:
            vals = np.array([getattr(p, f) for p in per_draw if getattr(p, f) is not None])
            mi[f] = float(vals.mean()) if vals.size else None
            mi[f + "_std"] = float(vals.std()) if vals.size else None
        mi["precision_projected"] = metrics.precision_at_ratio(base.recall_pos, base.far, r) \
            if base.recall_pos is not None and base.far is not None and \
            r * base.recall_pos + base.far > 0 else None
        z = {"ratio": r, "attack": "ZeroR", "n_resamples": 1,
             "support_pos": zr.support_pos, "support_neg": zr.support_neg}
        for f in SWEEP_FIELDS:
            z[f] = getattr(zr, f)
            z[f + "_std"] = 0.0 if getattr(zr, f) is not None else None
        z["precision_projected"] = metrics.precision_at_ratio(1.0, 1.0, r)
        rows.extend([mi, z])
    return rows


# -- overfitting trajectory --------------------------------------------------


def overfitting_trajectory(checkpoints, members, nonmembers, learner: str = "fcnn_128_64",
                           plan: SplitPlan = SplitPlan(), min_samples: int = 30, seed: int = 0,
                           search=None, group_by: str = "true_class", subsets=SUBSETS) -> list[dict]:
    """Confidence-probe attack on every checkpoint, for each requested data subset."""
    if not checkpoints:
        raise ValueError("no checkpoints given")
    series = []
    probe = ProbeSpec("confidence")
    for path in checkpoints:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        model = load_checkpoint(path)
        acc = evaluate_target(model, members, nonmembers)
        records, _ = assemble(model, members, nonmembers, probe)
        classes = list(range(model.n_classes))
        point = {"epoch": model.epoch, **acc,
                 "gap": acc["train_accuracy"] - acc["test_accuracy"]}
        wrong = records.subset(np.flatnonzero(~records.is_correct))
        point["misclassified_members"], point["misclassified_nonmembers"] = wrong.counts()
        for subset in subsets:
            res = per_class_attack(subset_records(records, subset), learner, plan, search, seed,
                                   min_samples, group_by, classes=classes, raise_if_empty=False)
            agg = res.aggregate
            point[subset] = {
                "balanced_accuracy": agg["balanced_accuracy"]["mean"] if agg and agg["balanced_accuracy"] else None,
                "balanced_accuracy_std": agg["balanced_accuracy"]["std"] if agg and agg["balanced_accuracy"] else None,
                "far": agg["far"]["mean"] if agg and agg["far"] else None,
                "accuracy": agg["accuracy"]["mean"] if agg and agg["accuracy"] else None,
                "n_classes_attacked": len(res.reports),
                "skipped": len(res.skipped),
            }
        log.info("trajectory epoch %d: gap=%.3f %s", model.epoch, point["gap"],
                 {s: point[s]["balanced_accuracy"] for s in subsets})
        series.append(point)
    return series


def divergence_epoch(history: list[dict]) -> int | None:
    """Epoch with the lowest test loss; test loss rises after it."""
    pts = [(h["test_loss"], h["epoch"]) for h in history if h.get("test_loss") is not None]
    return min(pts)[1] if pts else None


# -- confidence histograms ---------------------------------------------------


def confidence_distribution(records: MembershipRecords, class_id: int, subset: str = "all",
                            bins: int = 20) -> dict:
    """Histogram of the true-class confidence for members and nonmembers of one class."""
    if records.family != "confidence":
        raise ValueError("confidence_distribution needs confidence-probe records")
    recs = subset_records(records, subset)
    recs = recs.subset(np.flatnonzero(recs.true_class == class_id))
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = {"class_id": int(class_id), "subset": subset, "edges": edges.tolist(),
           "empty": len(recs) == 0}
    conf = recs.features[np.arange(len(recs)), recs.true_class] if len(recs) else np.zeros(0)
    for side, mask in (("member", recs.is_member), ("nonmember", ~recs.is_member)):
        counts, _ = np.histogram(conf[mask], bins=edges)
        out[side] = counts.tolist()
    return out


def total_variation(hist: dict) -> float:
    """Total-variation distance between the member and nonmember histograms."""
    a, b = np.array(hist["member"], float), np.array(hist["nonmember"], float)
    if a.sum() == 0 or b.sum() == 0:
        return float("nan")
    return 0.5 * float(np.abs(a / a.sum() - b / b.sum()).sum())

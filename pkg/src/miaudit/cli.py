"""Command-line entry point: ``miaudit <subcommand> ...``.

Run artifacts live under ``$MIAUDIT_RUNS`` (default ``./runs``), one directory
per config hash.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments, plots, report
from .attacks import AttackModel
from .config import ConfigError, load_config
from .gateway.training import checkpoint_hash

log = logging.getLogger("miaudit")

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FAILURE = 1


class MissingArtifact(FileNotFoundError):
    pass


def _config(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"target.seed={args.seed}", f"attack.seed={args.seed}",
                      f"evaluation.seed={args.seed}"]
    cfg = load_config(args.config, overrides)
    print(f"config_hash {cfg.config_hash()}")
    return cfg


def _run_dir(args) -> Path:
    root = experiments.runs_root(args.runs)
    exact = root / args.run
    if (exact / "bundle.json").exists():
        return exact
    hits = sorted(p for p in root.glob(f"{args.run}*") if (p / "bundle.json").exists())
    if len(hits) != 1:
        raise MissingArtifact(f"no unique run matching {args.run!r} under {root}")
    return hits[0]


def cmd_train_target(args):
    cfg = _config(args)
    members, nonmembers, n_classes = experiments.prepare_data(cfg)
    model, paths = experiments.prepare_target(cfg, members, nonmembers, n_classes, args.runs)
    last = model.history[-1] if model.history else {}
    print(f"checkpoint_hash {checkpoint_hash(model)}")
    print(f"checkpoints {len(paths)} in {paths[-1].parent if paths else '-'}")
    print(f"train_accuracy {last.get('train_accuracy')} test_accuracy {last.get('test_accuracy')}")


def cmd_extract(args):
    from .attacks import assemble
    from .gateway import data as gdata
    from .probes import FeatureCache

    cfg = _config(args)
    members, nonmembers, n_classes = experiments.prepare_data(cfg)
    model, _ = experiments.prepare_target(cfg, members, nonmembers, n_classes, args.runs)
    ckpt = checkpoint_hash(model)
    cache = FeatureCache(experiments.runs_root(args.runs) / "cache")
    for pc in cfg.probes:
        m = gdata.sample(members, pc.max_samples, cfg.data.seed + 101)
        n = gdata.sample(nonmembers, pc.max_samples, cfg.data.seed + 102)
        records, prov = assemble(model, m, n, pc.spec(), cache, ckpt)
        print(f"{prov.probe}: {prov.n_members} members, {prov.n_nonmembers} nonmembers, "
              f"{prov.n_failed} failed, {len(records.columns)} columns")


def cmd_attack(args):
    cfg = _config(args)
    bundle = experiments.run_full_evaluation(cfg, args.runs)
    run_dir = experiments.runs_root(args.runs) / cfg.config_hash()
    report.emit_report(bundle, "csv", run_dir / "rows.csv")
    print(f"run_dir {run_dir}")
    for c in bundle.cells:
        if c.class_scope == "ALL" and c.aggregate and c.aggregate["balanced_accuracy"]:
            ba, far = c.aggregate["balanced_accuracy"], c.aggregate["far"]
            print(f"{c.probe:>16} {c.subset:>13} {c.learner:>13} "
                  f"bal_acc {100 * ba['mean']:.2f}±{100 * ba['std']:.2f} "
                  f"FAR {report.pct(far['mean'] if far else None)}")
    if bundle.errors:
        log.warning("%d stages failed; see bundle.json errors", len(bundle.errors))


def cmd_report(args):
    run_dir = _run_dir(args)
    bundle = experiments.ResultsBundle.load(run_dir / "bundle.json")
    out = Path(args.out) if args.out else run_dir / f"report.{args.format}"
    report.emit_report(bundle, args.format, out)
    print(out)


def cmd_sweep(args):
    run_dir = _run_dir(args)
    sweep = run_dir / "sweep"
    if not (sweep / "attack.joblib").exists():
        raise MissingArtifact(f"{sweep} has no fitted attack model; run `attack` first")
    model = AttackModel.load(sweep / "attack.joblib")
    records = experiments.load_records(sweep / "eval_records.npz")
    ratios = [float(r) for r in args.ratios.split(",")]
    rows = experiments.imbalance_sweep(model, records, ratios, args.resamples, args.seed or 0)
    text = report.sweep_csv(rows)
    out = Path(args.out) if args.out else run_dir / "imbalance_sweep.csv"
    out.write_text(text)
    (out.with_suffix(".json")).write_text(json.dumps(rows, indent=1))
    sys.stdout.write(text)


def cmd_trajectory(args):
    cfg = _config(args)
    members, nonmembers, n_classes = experiments.prepare_data(cfg)
    model, paths = experiments.prepare_target(cfg, members, nonmembers, n_classes, args.runs)
    if args.every > 1:
        paths = [p for i, p in enumerate(paths) if i % args.every == 0 or i == len(paths) - 1]
    a = cfg.attack
    series = experiments.overfitting_trajectory(paths, members, nonmembers, a.learners[0], a.plan(),
                                                a.min_samples, a.seed, a.search(), a.group_by)
    run_dir = experiments.runs_root(args.runs) / cfg.config_hash()
    run_dir.mkdir(parents=True, exist_ok=True)
    doc = {"config_hash": cfg.config_hash(), "series": series,
           "divergence_epoch": experiments.divergence_epoch(model.history)}
    out = run_dir / "trajectory.json"
    out.write_text(json.dumps(doc, indent=1))
    print(out)


def cmd_plot(args):
    root = experiments.runs_root(args.runs)
    run_dir = root / args.run
    paths = []
    if (run_dir / "bundle.json").exists():
        bundle = experiments.ResultsBundle.load(run_dir / "bundle.json")
        paths += plots.render_histograms(bundle.histograms, run_dir / "figures")
    if (run_dir / "trajectory.json").exists():
        doc = json.loads((run_dir / "trajectory.json").read_text())
        paths.append(plots.render_trajectory(doc["series"], run_dir / "figures" / "trajectory.png",
                                             doc.get("divergence_epoch")))
    if not paths:
        raise MissingArtifact(f"{run_dir} has neither bundle.json nor trajectory.json")
    for p in paths:
        print(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="miaudit", description=__doc__.splitlines()[0])
    parser.add_argument("--runs", default=None, help="run-directory root (default $MIAUDIT_RUNS or ./runs)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. target.epochs=5 (repeatable)")
        p.add_argument("--seed", type=int, default=None)
        return p

    with_config(sub.add_parser("train-target", help="train (or reuse) the target model")).set_defaults(
        func=cmd_train_target)
    with_config(sub.add_parser("extract", help="extract and cache probe features")).set_defaults(
        func=cmd_extract)
    with_config(sub.add_parser("attack", help="run the full attack grid")).set_defaults(func=cmd_attack)
    p = with_config(sub.add_parser("trajectory", help="attack every checkpoint"))
    p.add_argument("--every", type=int, default=1, help="use every k-th checkpoint")
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("report", help="emit the CSV/JSON report of a run")
    p.add_argument("--run", required=True, help="config hash (or unique prefix)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep-imbalance", help="re-evaluate one attack at several member:nonmember ratios")
    p.add_argument("--run", required=True)
    p.add_argument("--ratios", default="5,1,0.2")
    p.add_argument("--resamples", type=int, default=50)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render histogram and trajectory figures of a run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def _fail(code: int, exc: Exception, key=None) -> int:
    err = {"error": type(exc).__name__, "message": str(exc)}
    if key:
        err["key"] = key
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc, exc.key)
    except (MissingArtifact, FileNotFoundError) as exc:
        return _fail(EXIT_MISSING, exc)
    except Exception as exc:  # noqa: BLE001
        log.debug("command failed", exc_info=True)
        return _fail(EXIT_FAILURE, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())

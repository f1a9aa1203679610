"""Command-line entry point: ``seqcl run | make-data | report | verify``.

Exit codes: 0 success, 2 invalid configuration or usage, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from .errors import ConfigurationError, FormatError, ProtocolError
from .evaluation import RunRecord, emit_report, read_summary, summary_rows
from .protocol import FILE_NAMES, ExperimentPlan, Journal, execute, run_plan
from .streams import save_manifest, synth_split, template_classifier_accuracy, write_feature_sequences, write_strokes
from .streams.mnist import export_bundled_subset

log = logging.getLogger("seqcl")

JOURNAL = "journal.jsonl"
SNAPSHOT = "config.ini"


def _new_run_dir(base: Path) -> Path:
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for i in range(1000):
        d = base / (stamp if i == 0 else f"{stamp}-{i}")
        try:
            d.mkdir()
        except FileExistsError:
            continue
        return d
    raise RuntimeError(f"could not create a fresh run directory under {base}")


def _write_outputs(run_dir: Path, plan: ExperimentPlan, selection, records: list[RunRecord]) -> None:
    val, assess = plan.scenario.split()
    save_manifest(run_dir / "validation_manifest.json", val.manifest)
    save_manifest(run_dir / "assessment_manifest.json", assess.manifest)
    rec_dir = run_dir / "records"
    rec_dir.mkdir(exist_ok=True)
    for r in records:
        r.save(rec_dir / f"seed{r.seed}.json")
    if selection is not None:
        with open(run_dir / "selection.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "acc", "num_parameters", "point"])
            for row in sorted(selection.table, key=lambda r: r["rank"]):
                w.writerow([row["rank"], f"{row['acc']:.6g}", row["num_parameters"],
                            json.dumps(row["point"], sort_keys=True)])
        C.save_config(selection.config, run_dir / "selected.ini")
    emit_report(records, run_dir, svg=bool(plan.config["run"]["svg"]))


def cmd_run(args) -> int:
    if args.resume:
        target = Path(args.resume)
        run_dir = target.parent if target.is_file() else target
        if not (run_dir / SNAPSHOT).exists():
            raise ConfigurationError(f"--resume: {run_dir} has no {SNAPSHOT}")
        cfg = C.load_config(run_dir / SNAPSHOT)
        if args.set:
            log.warning("--set is ignored with --resume; the snapshot config is used")
    else:
        if not args.config:
            raise ConfigurationError("run needs --config (or --resume)")
        cfg = C.load_config(args.config, args.set or [])
        run_dir = None
    plan = ExperimentPlan.from_config(cfg)
    plan.scenario.split()  # surface data/stream errors before any training
    if run_dir is None:
        base = Path(cfg["run"]["output_dir"])
        run_dir = _new_run_dir(base)
        C.save_config(cfg, run_dir / SNAPSHOT)
        (base / "latest").write_text(run_dir.name + "\n")
    jobs = args.jobs or cfg["run"]["jobs"]
    journal = Journal(run_dir / JOURNAL)
    selection, records = run_plan(plan, journal, jobs)
    _write_outputs(run_dir, plan, selection, records)
    for row in summary_rows(records):
        print(f"{row['strategy']} {row['model']} chunk={row['chunk']}: ACC {row['acc_mean']} "
              f"+- {row['acc_std']} over {row['n']} seeds")
    print(f"results in {run_dir}")
    return 0


def cmd_make_data(args) -> int:
    out = Path(args.out)
    if args.kind == "mnist":
        d = export_bundled_subset(out, test_per_class=args.test_per_class, seed=args.seed)
        print(f"wrote MNIST IDX files to {d}")
        return 0
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"{out}: {e.strerror}") from None
    train, test = synth_split(args.kind, args.classes, args.train_per_class, args.test_per_class, args.seed)
    writer = write_strokes if args.kind == "strokes" else write_feature_sequences
    names = FILE_NAMES[args.kind]
    for name, data in zip(names, (train, test)):
        writer(out / name, data)
    manifest = {
        "format": "seqcl-data",
        "kind": args.kind,
        "seed": args.seed,
        "classes": args.classes,
        "train_per_class": args.train_per_class,
        "test_per_class": args.test_per_class,
        "files": {n: hashlib.sha256((out / n).read_bytes()).hexdigest() for n in names},
    }
    if args.test_per_class:
        manifest["template_accuracy"] = round(template_classifier_accuracy(train, test), 6)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(train)} train / {len(test)} test sequences to {out}")
    return 0


def _load_records(run_dir: Path) -> list[RunRecord]:
    files = sorted((run_dir / "records").glob("*.json"))
    if not files:
        raise ProtocolError(f"{run_dir}: no run records found")
    return [RunRecord.load(f) for f in files]


def cmd_report(args) -> int:
    records, benchmarks = [], {}
    for d in map(Path, args.run_dirs):
        recs = _load_records(d)
        records += recs
        for r in recs:
            benchmarks.setdefault(r.config.get("data", {}).get("benchmark", "?"), []).append(str(d))
    if len(benchmarks) > 1:
        detail = "; ".join(f"{b}: {sorted(set(ds))}" for b, ds in sorted(benchmarks.items()))
        raise ProtocolError(f"cannot aggregate runs over different benchmarks ({detail})")
    written = emit_report(records, args.out, svg=not args.no_svg)
    for p in written:
        print(p)
    return 0


def verify_run_dir(run_dir: Path, rerun: bool = False) -> list[tuple[str, bool, str]]:
    """Invariant checks on the artifacts of one run directory."""
    checks = []

    def check(name, fn):
        try:
            detail = fn() or ""
            checks.append((name, True, detail))
        except Exception as e:  # noqa: BLE001  (a failed check is a report line, not a crash)
            checks.append((name, False, f"{type(e).__name__}: {e}"))

    check("config snapshot validates", lambda: C.load_config(run_dir / SNAPSHOT) and None)
    records = []
    check("run records load", lambda: records.extend(_load_records(run_dir)) or f"{len(records)} records")

    def matrices():
        for r in records:
            r.matrix.validate()
            r.acc  # noqa: B018  (raises when the last row is incomplete)
    check("accuracy matrices complete and within [0, 1]", matrices)

    def summary():
        want = {(r["strategy"], r["model"], r["chunk"], str(r["n"]), r["acc_mean"], r["acc_std"])
                for r in summary_rows(records)}
        got = {(r["strategy"], r["model"], r["chunk"], r["n"], r["acc_mean"], r["acc_std"])
               for r in read_summary(run_dir / "summary.csv")}
        if want != got:
            raise ProtocolError("summary.csv does not match the run records")
    check("summary.csv matches records", summary)

    def leakage():
        val = json.loads((run_dir / "validation_manifest.json").read_text())
        assess = json.loads((run_dir / "assessment_manifest.json").read_text())
        if val["split"].get("same_stream") or val["scenario_kind"] == "SIT+NI":
            return "shared stream by declaration"
        shared = {c for s in val["step_classes"] for c in s} & {c for s in assess["step_classes"] for c in s}
        if shared:
            raise ProtocolError(f"validation and assessment share classes {sorted(shared)}")
    check("no class leakage between validation and assessment", leakage)

    def determinism():
        if not records:
            raise ProtocolError("no records")
        r = records[0]
        again = execute(r.config, "assessment", r.seed, r.diagnostics.get("grid_point"))
        if not np.array_equal(again.matrix.R, r.matrix.R, equal_nan=True):
            raise ProtocolError(f"seed {r.seed} did not reproduce its accuracy matrix")
    if rerun:
        check("seed rerun reproduces the accuracy matrix", determinism)
    return checks


def cmd_verify(args) -> int:
    ok = True
    for d in map(Path, args.run_dirs):
        for name, passed, detail in verify_run_dir(d, args.rerun):
            ok &= passed
            print(f"{'PASS' if passed else 'FAIL'} {d}: {name}{' (' + detail + ')' if detail else ''}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqcl", description="Continual learning experiments on sequence data")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="select hyperparameters and assess a strategy")
    r.add_argument("--config", help="INI run configuration")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. strategy.lam=100")
    r.add_argument("--resume", metavar="RUN_DIR_OR_JOURNAL", help="continue an interrupted run")
    r.add_argument("--jobs", type=int, default=None, help="worker processes")
    r.set_defaults(fn=cmd_run)

    m = sub.add_parser("make-data", help="write a synthetic dataset (or export the bundled MNIST subset)")
    m.add_argument("kind", choices=["strokes", "featureseq", "mnist"])
    m.add_argument("out")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--classes", type=int, default=16)
    m.add_argument("--train-per-class", type=int, default=200)
    m.add_argument("--test-per-class", type=int, default=50)
    m.set_defaults(fn=cmd_make_data)

    rep = sub.add_parser("report", help="aggregate run directories into tables and charts")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--out", required=True)
    rep.add_argument("--no-svg", action="store_true")
    rep.set_defaults(fn=cmd_report)

    v = sub.add_parser("verify", help="check the invariants of run artifacts")
    v.add_argument("run_dirs", nargs="+")
    v.add_argument("--rerun", action="store_true", help="also re-run one seed and compare bit for bit")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigurationError as e:
        print(f"seqcl: configuration error: {e}", file=sys.stderr)
        return 2
    except (ProtocolError, FormatError, OSError, ArithmeticError, RuntimeError, ValueError) as e:
        log.exception("%s failed", args.command)
        print(f"seqcl: {args.command} failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

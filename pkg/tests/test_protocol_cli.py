import json
import os
import signal
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from seqcl import config as C
from seqcl.cli import main, verify_run_dir
from seqcl.errors import ConfigurationError
from seqcl.evaluation import RunRecord, read_summary
from seqcl.models import Classifier
from seqcl.optim import make_optimizer
from seqcl.protocol import ExperimentPlan, GridSpec, Journal, ScenarioSpec, grid_search, run_assessment
from seqcl.strategies import LossContext, StrategyConfig, make_strategy
from seqcl.streams import read_feature_sequences, template_classifier_accuracy
from seqcl.training import ModelSpec, TrainConfig, train_step

ROOT = Path(__file__).resolve().parent.parent
DESK = {"data.train_per_class": 100, "data.test_per_class": 50, "model.kind": "mlp", "model.hidden_size": 32,
        "run.seeds": 1}


def desk(**over):
    return C.apply_overrides(C.default_config(), {**DESK, **over})


@pytest.fixture(scope="module")
def featureseq_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "fs"
    assert main(["make-data", "featureseq", str(out), "--classes", "8", "--train-per-class", "30",
                 "--test-per-class", "10", "--seed", "3"]) == 0
    return out


def fs_config(path, **over):
    return C.apply_overrides(C.default_config(), {
        "data.benchmark": "featureseq", "data.path": str(path), "data.num_steps": 2, "data.validation_steps": 2,
        "model.kind": "lstm", "model.hidden_size": 8, "train.epochs": 1, "train.lr": 1e-2, "run.seeds": 1, **over})


# -- grid search --------------------------------------------------------------------

def test_grid_of_size_one(featureseq_dir):
    plan = ExperimentPlan.from_config(fs_config(featureseq_dir, **{"grid.strategy.lam": [5.0],
                                                                  "strategy.name": "ewc"}))
    sel = grid_search(plan)
    assert sel.point == {"strategy.lam": 5.0} and len(sel.table) == 1
    assert sel.acc == sel.table[0]["acc"] and sel.config["strategy"]["lam"] == 5.0


def test_identical_points_tie_break_to_first(featureseq_dir):
    plan = ExperimentPlan.from_config(fs_config(featureseq_dir, **{"grid.train.optimizer": ["sgd", "adam"],
                                                                  "train.lr": 1e-12}))
    # a vanishing step size makes every point score the same; "adam" sorts first
    sel = grid_search(plan)
    assert sel.table[0]["acc"] == sel.table[1]["acc"]
    assert sel.point == {"train.optimizer": "adam"}


def test_ties_prefer_fewer_parameters(featureseq_dir):
    plan = ExperimentPlan.from_config(fs_config(featureseq_dir, **{"grid.model.hidden_size": [16, 4],
                                                                  "train.lr": 1e-12}))
    sel = grid_search(plan)
    accs = {json.dumps(r["point"]): r["acc"] for r in sel.table}
    if len(set(accs.values())) == 1:
        assert sel.point == {"model.hidden_size": 4}


def test_grid_order_is_numeric():
    pts = GridSpec({"strategy.lam": [10000, 100, 1, 0.5]}).points()
    assert [p["strategy.lam"] for p in pts] == [0.5, 1, 100, 10000]


def test_empty_grid_is_a_configuration_error(featureseq_dir):
    with pytest.raises(ConfigurationError):
        grid_search(ExperimentPlan.from_config(fs_config(featureseq_dir)))
    with pytest.raises(ConfigurationError):
        ExperimentPlan.from_config(fs_config(featureseq_dir, **{"grid.strategy.lam": []}))


def _ewc_three_steps():
    cfg = desk(**{"data.same_stream": False, "data.num_steps": 2, "model.hidden_size": 64, "strategy.name": "ewc"})
    val, _ = ScenarioSpec.from_config(cfg).split()
    assert len(val) == 3
    return cfg, val


def test_ewc_extreme_lambda_selection():
    cfg, _ = _ewc_three_steps()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        journal = Journal()
        sel = grid_search(ExperimentPlan.from_config(C.apply_overrides(cfg, {"grid.strategy.lam": [0.0, 1e6]})),
                          journal)
    assert sel.acc == max(r["acc"] for r in sel.table)
    assert len(journal.done) == 2


def _two_ewc_steps(lam, val):
    s = make_strategy(StrategyConfig("ewc", lam=lam))
    s.prepare(len(val))
    m = Classifier(ModelSpec("mlp", 64).build_config(val), 0)
    tc, ctx, rng, seen, accs = TrainConfig(), LossContext(False), np.random.default_rng(0), set(), []
    for i, st in enumerate(val.steps[:2]):
        seen |= set(st.classes_introduced)
        ctx.mask = np.isin(np.arange(m.config.num_classes_total), sorted(seen))
        tasks = np.zeros(len(st.train), dtype=int)
        accs.append(train_step(m, s, make_optimizer("adam", m.parameters(), tc.lr), st.train, tasks, i, ctx, None, 32,
                               tc, rng)["train_acc"])
        s.end_step(m, st.train, tasks, i, ctx)
    omega, anchor = s.omegas[0]
    drift = sum(float((omega[k] * (p.data - anchor[k]) ** 2).sum()) for k, p in m.named_parameters())
    return drift, accs


def test_ewc_extreme_lambda_pins_important_weights():
    _, val = _ewc_three_steps()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        free, _ = _two_ewc_steps(0.0, val)
        stiff, _ = _two_ewc_steps(1e6, val)
    assert stiff < 1e-2 * free


@pytest.mark.xfail(strict=True, reason="with unseen-class masking the new output rows carry zero importance, "
                   "so step 2 is still learned to the convergence threshold")
def test_ewc_extreme_lambda_lowers_step_two_train_accuracy():
    _, val = _ewc_three_steps()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, accs = _two_ewc_steps(1e6, val)
    assert accs[1] < accs[0]


# -- assessment -----------------------------------------------------------------------

def test_assessment_single_seed_and_determinism():
    cfg = desk()
    (a,) = run_assessment(cfg, [4])
    (b,) = run_assessment(cfg, [4])
    assert a.seed == 4 and np.array_equal(a.matrix.R, b.matrix.R, equal_nan=True)
    (c,) = run_assessment(cfg, [5])
    assert not np.array_equal(a.matrix.R, c.matrix.R, equal_nan=True)


def test_naive_five_step_signature():
    (rec,) = run_assessment(desk(), [0])
    assert rec.matrix.num_steps == 5 and 0.15 <= rec.acc <= 0.25


def test_online_guard_in_config():
    with pytest.raises(ConfigurationError, match="allow_offline_gem"):
        ExperimentPlan.from_config(desk(**{"strategy.name": "gem", "train.online_epochs": 3}))
    ExperimentPlan.from_config(desk(**{"strategy.name": "gem", "train.online_epochs": 3,
                                       "train.allow_offline_gem": True}))


# -- configuration ----------------------------------------------------------------------

def test_config_parsing_and_validation(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("[strategy]\nname = ewc\nlam = [0, 1e3]\n[train]\nmask_unseen = off\n[grid]\ntrain.lr = [1e-3, 1e-2]\n")
    cfg = C.load_config(p, ["seeds=2", "strategy.temperature=2"])
    assert cfg["strategy"]["lam"] == [0, 1000.0] and cfg["train"]["mask_unseen"] is False
    assert cfg["run"]["seeds"] == 2 and cfg["grid"] == {"train.lr": [1e-3, 1e-2]}
    C.save_config(cfg, tmp_path / "again.cfg")
    assert C.load_config(tmp_path / "again.cfg") == cfg
    for bad in (["strategy.nope=1"], ["data.chunk=5"], ["train.lr=0"], ["model.kind=cnn"], ["run.seeds=0"]):
        with pytest.raises(ConfigurationError):
            C.load_config(p, bad)
    p.write_text("[nonsense]\na = 1\n")
    with pytest.raises(ConfigurationError, match="nonsense"):
        C.load_config(p)


# -- CLI ------------------------------------------------------------------------------------

def test_cli_run_smoke_and_verify(tmp_path, capsys):
    out = tmp_path / "runs"
    code = main(["run", "--config", str(ROOT / "configs" / "smnist_naive.cfg"), "--set", "seeds=1",
                 "--set", f"run.output_dir={out}", "--set", "data.train_per_class=50", "--set", "run.svg=false"])
    assert code == 0
    run_dir = out / (out / "latest").read_text().strip()
    recs = sorted((run_dir / "records").glob("*.json"))
    assert len(recs) == 1 and (run_dir / "summary.csv").exists() and (run_dir / "config.ini").exists()
    assert (run_dir / "assessment_manifest.json").exists()
    (row,) = read_summary(run_dir / "summary.csv")
    assert row["n"] == "1" and row["strategy"] == "naive"
    checks = verify_run_dir(run_dir, rerun=True)
    assert all(ok for _, ok, _ in checks), checks
    assert main(["verify", str(run_dir)]) == 0
    assert "PASS" in capsys.readouterr().out


def test_cli_configuration_errors_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("[data]\nbenchmark = featureseq\npath = /nonexistent/data\n")
    assert main(["run", "--config", str(cfg)]) == 2
    assert "data.path" in capsys.readouterr().err
    assert main(["run", "--config", str(cfg), "--set", "strategy.bogus=1"]) == 2
    with pytest.raises(SystemExit) as e:
        main(["report", "--out", str(tmp_path / "r")])
    assert e.value.code == 2


def test_make_data_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["make-data", "featureseq", str(d), "--classes", "4", "--train-per-class", "10",
                     "--test-per-class", "5", "--seed", "7"]) == 0
    for name in ("train.fseq", "test.fseq", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert main(["make-data", "strokes", str(tmp_path / "s"), "--classes", "3", "--train-per-class", "4",
                 "--test-per-class", "2"]) == 0
    assert (tmp_path / "s" / "train.strokes").exists()


def test_make_data_sixteen_classes_round_trip(tmp_path):
    out = tmp_path / "fs"
    assert main(["make-data", "featureseq", str(out), "--classes", "16", "--train-per-class", "200",
                 "--test-per-class", "20", "--seed", "7"]) == 0
    train = read_feature_sequences(out / "train.fseq")
    assert len(train) == 16 * 200 and sorted(set(train.targets.tolist())) == list(range(16))
    assert template_classifier_accuracy(train, read_feature_sequences(out / "test.fseq")) >= 0.99
    assert json.loads((out / "manifest.json").read_text())["template_accuracy"] >= 0.99


def _cli_run(featureseq_dir, out, *extra):
    return main(["run", "--config", str(ROOT / "configs" / "featureseq_ewc.cfg"), "--set", f"data.path={featureseq_dir}",
                 "--set", f"run.output_dir={out}", "--set", "run.seeds=1", "--set", "model.hidden_size=8",
                 "--set", "train.epochs=1", "--set", "run.svg=false", "--set", "data.num_steps=2",
                 "--set", "data.validation_steps=2", *extra])


def test_report_aggregation(tmp_path, featureseq_dir, capsys):
    out = tmp_path / "runs"
    assert _cli_run(featureseq_dir, out) == 0
    run_dir = out / (out / "latest").read_text().strip()
    assert (run_dir / "selection.csv").exists() and (run_dir / "selected.ini").exists()
    assert main(["report", str(run_dir), "--out", str(tmp_path / "rep"), "--no-svg"]) == 0
    assert read_summary(tmp_path / "rep" / "summary.csv") == read_summary(run_dir / "summary.csv")
    # a second benchmark in the same report is refused, naming both directories
    other = tmp_path / "other" / "records"
    other.mkdir(parents=True)
    rec = RunRecord.load(next((run_dir / "records").glob("*.json")))
    rec.config["data"]["benchmark"] = "strokes"
    rec.save(other / "seed0.json")
    capsys.readouterr()
    assert main(["report", str(run_dir), str(other.parent), "--out", str(tmp_path / "rep2")]) == 1
    err = capsys.readouterr().err
    assert "strokes" in err and str(other.parent) in err and str(run_dir) in err


def test_report_sequence_length_curve(tmp_path):
    dirs = []
    for chunk in (28, 16, 4):
        out = tmp_path / f"c{chunk}"
        assert main(["run", "--config", str(ROOT / "configs" / "smnist_naive.cfg"), "--set", "seeds=1",
                     "--set", f"run.output_dir={out}", "--set", f"data.chunk={chunk}", "--set", "run.svg=false",
                     "--set", "data.train_per_class=20", "--set", "data.test_per_class=10",
                     "--set", "train.max_epochs=2"]) == 0
        dirs.append(str(out / (out / "latest").read_text().strip()))
    assert main(["report", *dirs, "--out", str(tmp_path / "rep"), "--no-svg"]) == 0
    import csv
    with open(tmp_path / "rep" / "seqlen.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert sorted(int(r["seq_len"]) for r in rows) == [28, 49, 196]


def test_kill_and_resume(tmp_path, featureseq_dir):
    out = tmp_path / "runs"
    cmd = [sys.executable, "-m", "seqcl.cli", "run", "--config", str(ROOT / "configs" / "featureseq_ewc.cfg"),
           "--set", f"data.path={featureseq_dir}", "--set", f"run.output_dir={out}", "--set", "run.seeds=2",
           "--set", "run.svg=false", "--set", "model.hidden_size=16", "--set", "train.epochs=3",
           "--set", "data.num_steps=2", "--set", "data.validation_steps=2"]
    proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    journal = None
    deadline = time.time() + 300
    while time.time() < deadline and proc.poll() is None:
        if (out / "latest").exists():
            journal = out / (out / "latest").read_text().strip() / "journal.jsonl"
            if journal.exists() and len(journal.read_text().splitlines()) >= 1:
                break
        time.sleep(0.05)
    assert proc.poll() is None, "the run finished before it could be interrupted"
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    before = [json.loads(line)["key"] for line in journal.read_text().splitlines() if line.strip()]
    assert 1 <= len(before) < 5  # 3 grid points + 2 seeds
    assert main(["run", "--resume", str(journal)]) == 0
    keys = [json.loads(line)["key"] for line in journal.read_text().splitlines() if line.strip()]
    assert keys[: len(before)] == before
    assert len(keys) == len(set(keys)) == 5
    assert len(list((journal.parent / "records").glob("*.json"))) == 2

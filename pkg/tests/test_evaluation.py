import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import blob_dataset
from seqcl.errors import ProtocolError
from seqcl.evaluation import AccuracyMatrix, RunRecord, acc_metric, accuracy, emit_report, read_summary
from seqcl.models import Classifier, ModelConfig
from seqcl.sequences import SequenceBatch
from seqcl.strategies import StrategyConfig
from seqcl.streams import build_class_incremental
from seqcl.streams.mnist import mnist_dataset
from seqcl.training import ModelSpec, TrainConfig, run_stream


class ConstantModel:
    def __init__(self, label):
        self.label = label

    def predict(self, batch, task_label=None, mask=None):
        return np.full(len(batch), self.label)


class PerfectModel:
    def predict(self, batch, task_label=None, mask=None):
        return batch.targets.copy()


def balanced(n=10):
    return SequenceBatch.from_fixed(np.zeros((2 * n, 1, 1)), [0, 1] * n)


def matrix(rows):
    return AccuracyMatrix.from_list(rows)


def record(last_row, name="naive", kind="mlp", seed=0, chunk=28, P=None, times=(1.0,)):
    T = len(last_row)
    rows = [[None] * T for _ in range(T)]
    for i in range(T):
        for t in range(i + 1):
            rows[i][t] = 1.0 if i == t else 0.5
    rows[-1] = list(last_row)
    strategy = {"name": name}
    if P is not None:
        strategy["P"] = P
    cfg = {"strategy": strategy, "model": {"kind": kind, "label": ""}, "data": {"benchmark": "smnist", "chunk": chunk}}
    return RunRecord(cfg, seed, matrix(rows), list(times), {})


# -- accuracy -----------------------------------------------------------------------

def test_accuracy_examples():
    assert accuracy(ConstantModel(1), balanced()) == 0.5
    assert accuracy(PerfectModel(), balanced()) == 1.0
    with pytest.raises(ProtocolError):
        accuracy(PerfectModel(), SequenceBatch.empty(1, 1))


def test_untrained_model_is_at_chance_on_mnist():
    ds = mnist_dataset(28, test_per_class=100)
    accs = [accuracy(Classifier(ModelConfig("mlp", 784, 64, num_classes_total=10), s), ds.test) for s in range(5)]
    assert abs(np.mean(accs) - 0.1) <= 0.03


# -- ACC --------------------------------------------------------------------------------

def test_acc_examples():
    assert acc_metric(matrix([[1.0, None], [1.0, 1.0]])) == 1.0
    five = [[None] * 5 for _ in range(4)] + [[0.0, 0.0, 0.0, 0.0, 1.0]]
    for i in range(4):
        five[i][: i + 1] = [1.0] * (i + 1)
    assert acc_metric(matrix(five)) == pytest.approx(0.2)
    with pytest.raises(ProtocolError):
        acc_metric(matrix([[1.0, None], [1.0, None]]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8)).map(lambda s: (s[0], s[0])), elements=st.floats(0, 1)))
def test_acc_is_mean_of_last_row(R):
    m = AccuracyMatrix(len(R))
    for i in range(len(R)):
        for t in range(len(R)):
            m.record(i, t, float(R[i, t]))
    assert acc_metric(m) == pytest.approx(float(np.mean(R[-1])), abs=1e-15)


def test_matrix_validation():
    m = AccuracyMatrix(2)
    with pytest.raises(ValueError):
        m.record(0, 0, 1.5)
    m.R[1, 1] = 0.3
    with pytest.raises(ProtocolError):
        m.validate()


def test_run_record_round_trip(tmp_path):
    rec = RunRecord({"strategy": {"name": "gem", "gamma": 0.5}}, 3, matrix([[0.9, None], [0.1, 0.8]]),
                    [0.25, 1.0 / 3.0], {"gem_fallbacks": 0, "epochs": [2, 2]})
    rec.save(tmp_path / "r.json")
    assert RunRecord.load(tmp_path / "r.json") == rec


# -- reports ------------------------------------------------------------------------------

def test_report_single_run(tmp_path):
    emit_report([record([0.3, 0.1])], tmp_path, svg=False)
    (row,) = read_summary(tmp_path / "summary.csv")
    assert float(row["acc_mean"]) == 0.2 and float(row["acc_std"]) == 0.0 and row["n"] == "1"


def test_report_five_identical_runs(tmp_path):
    emit_report([record([0, 0, 0, 0, 1.0], seed=s) for s in range(5)], tmp_path, svg=False)
    (row,) = read_summary(tmp_path / "summary.csv")
    assert (row["acc_mean"], row["acc_std"], row["n"]) == ("0.2", "0", "5")


def test_paired_csv_for_total_forgetting(tmp_path):
    T = 4
    rows = [[None] * T for _ in range(T)]
    for i in range(T):
        for t in range(i + 1):
            rows[i][t] = 1.0 if i == t else 0.0
    emit_report([RunRecord({"strategy": {"name": "naive"}}, 0, matrix(rows))], tmp_path, svg=False)
    with open(tmp_path / "paired.csv") as fh:
        got = [(int(r["step"]), float(r["acc_at_step_end"]), float(r["acc_final"])) for r in csv.DictReader(fh)]
    assert got == [(0, 1.0, 0.0), (1, 1.0, 0.0), (2, 1.0, 0.0), (3, 1.0, 1.0)]


def test_summary_round_trip_and_other_tables(tmp_path):
    rng = np.random.default_rng(0)
    recs = []
    for name in ("naive", "replay"):
        for chunk in (28, 4):
            for s in range(3):
                recs.append(record(rng.uniform(size=3), name=name, seed=s, chunk=chunk, P=5 if name == "replay" else None,
                                   times=rng.uniform(size=3)))
    files = emit_report(recs, tmp_path)
    names = {p.name for p in files}
    assert {"summary.csv", "paired.csv", "seqlen.csv", "replay_sweep.csv", "timing.csv", "summary.svg"} <= names
    assert (tmp_path / "summary.svg").read_text().lstrip().startswith("<?xml")
    for row in read_summary(tmp_path / "summary.csv"):
        accs = [r.acc for r in recs if r.config["strategy"]["name"] == row["strategy"]
                and str(r.config["data"]["chunk"]) == row["chunk"]]
        assert row["acc_mean"] == f"{np.mean(accs):.6g}" and row["acc_std"] == f"{np.std(accs):.6g}"
    with open(tmp_path / "seqlen.csv") as fh:
        assert sorted((r["strategy"], r["seq_len"]) for r in csv.DictReader(fh)) == [
            ("naive", "196"), ("naive", "28"), ("replay", "196"), ("replay", "28")]


def test_report_needs_records(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)


# -- timing ------------------------------------------------------------------------------------

def test_training_time_grows_with_epochs():
    sc = build_class_incremental(blob_dataset(4, 100, T=12, d=4), 2, 2)
    spec = ModelSpec("lstm", 16)

    def seconds(epochs):
        rec = run_stream(sc, spec, StrategyConfig("naive"), TrainConfig(epochs=epochs, lr=1e-2), seed=0)
        return sum(rec.step_times)

    short = min(seconds(2) for _ in range(2))
    long_ = min(seconds(4) for _ in range(2))
    assert long_ >= 1.5 * short

"""Accuracy matrices, the ACC metric, run records and report files."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ProtocolError
from .sequences import SequenceBatch


def accuracy(model, test_set: SequenceBatch, task_label: int | None = None, mask=None,
             batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions on ``test_set``."""
    if len(test_set) == 0:
        raise ProtocolError("accuracy on an empty test set")
    correct = 0
    for mb in test_set.minibatches(batch_size):
        correct += int((model.predict(mb, task_label, mask=mask) == mb.targets).sum())
    return correct / len(test_set)


class AccuracyMatrix:
    """``R[i, t]``: accuracy on step ``t`` after training through step ``i``; NaN when absent."""

    def __init__(self, num_steps: int):
        self.R = np.full((num_steps, num_steps), np.nan)

    @property
    def num_steps(self) -> int:
        return self.R.shape[0]

    def record(self, i: int, t: int, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {value}")
        self.R[i, t] = value

    def row(self, i: int) -> np.ndarray:
        return self.R[i]

    def validate(self) -> None:
        present = self.R[~np.isnan(self.R)]
        if present.size and (present.min() < 0 or present.max() > 1):
            raise ProtocolError("accuracy entries outside [0, 1]")
        for i in range(self.num_steps):
            row = self.R[i]
            if np.all(np.isnan(row)):
                continue
            if np.any(np.isnan(row[: i + 1])):
                raise ProtocolError(f"row {i} lacks entries for steps <= {i}")

    def to_list(self) -> list[list[float | None]]:
        return [[None if math.isnan(v) else float(v) for v in row] for row in self.R]

    @classmethod
    def from_list(cls, rows) -> AccuracyMatrix:
        m = cls(len(rows))
        m.R = np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64).reshape(
            len(rows), len(rows)
        )
        return m

    def __eq__(self, other) -> bool:
        return isinstance(other, AccuracyMatrix) and np.array_equal(self.R, other.R, equal_nan=True)


def acc_metric(R: AccuracyMatrix) -> float:
    """Mean accuracy over all steps after training on the last one."""
    last = R.R[-1]
    if np.any(np.isnan(last)):
        raise ProtocolError("the last row of the accuracy matrix is incomplete")
    return float(last.mean())


@dataclass
class RunRecord:
    config: dict
    seed: int
    matrix: AccuracyMatrix
    step_times: list[float] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def acc(self) -> float:
        return acc_metric(self.matrix)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "R": self.matrix.to_list(),
            "step_times": list(self.step_times),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        return cls(d["config"], int(d["seed"]), AccuracyMatrix.from_list(d["R"]),
                   list(d.get("step_times", [])), dict(d.get("diagnostics", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> RunRecord:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other) -> bool:
        return isinstance(other, RunRecord) and self.to_dict() == other.to_dict()


# -- aggregation -------------------------------------------------------------

def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _g6(x: float) -> str:
    return f"{x:.6g}"


def _key(rec: RunRecord, name: str, default="") -> str:
    cfg = rec.config
    for section in ("strategy", "model", "run", "data"):
        if isinstance(cfg.get(section), dict) and name in cfg[section]:
            return str(cfg[section][name])
    return str(cfg.get(name, default))


def _chunk(rec: RunRecord) -> str:
    """Pixel chunk size; only meaningful for the MNIST pixel-sequence benchmarks."""
    data = rec.config.get("data", {})
    if isinstance(data, dict) and data.get("benchmark", "smnist") not in ("smnist", "pmnist"):
        return ""
    return _key(rec, "chunk")


def summary_rows(records: Sequence[RunRecord]) -> list[dict]:
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in records:
        groups[(_key(r, "name"), _key(r, "label") or _key(r, "kind"), _chunk(r))].append(r.acc)
    rows = []
    for (strategy, model, chunk), accs in sorted(groups.items()):
        m, s = mean_std(accs)
        rows.append({"strategy": strategy, "model": model, "chunk": chunk, "n": len(accs),
                     "acc_mean": _g6(m), "acc_std": _g6(s)})
    return rows


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)


def paired_rows(record: RunRecord) -> list[dict]:
    R = record.matrix.R
    T = R.shape[0]
    rows = []
    for t in range(T):
        if math.isnan(R[t, t]) or math.isnan(R[T - 1, t]):
            continue
        rows.append({"step": t, "acc_at_step_end": _g6(R[t, t]), "acc_final": _g6(R[T - 1, t])})
    return rows


def emit_report(records: Sequence[RunRecord], out_dir, svg: bool = True) -> list[Path]:
    """Write summary, paired-plot, sequence-length, replay-sweep and timing CSVs (plus SVG charts)."""
    if not records:
        raise ValueError("emit_report needs at least one run record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    summary = summary_rows(records)
    p = out / "summary.csv"
    _write_csv(p, ["strategy", "model", "chunk", "n", "acc_mean", "acc_std"], summary)
    written.append(p)

    paired = []
    for r in records:
        for row in paired_rows(r):
            paired.append({"strategy": _key(r, "name"), "model": _key(r, "label") or _key(r, "kind"),
                           "seed": r.seed, **row})
    p = out / "paired.csv"
    _write_csv(p, ["strategy", "model", "seed", "step", "acc_at_step_end", "acc_final"], paired)
    written.append(p)

    seqlen: dict[tuple, list[float]] = defaultdict(list)
    for r in records:
        chunk = _chunk(r)
        if chunk:
            seqlen[(_key(r, "name"), int(float(chunk)))].append(r.acc)
    p = out / "seqlen.csv"
    _write_csv(p, ["strategy", "chunk", "seq_len", "acc_mean", "acc_std", "n"], [
        {"strategy": s, "chunk": c, "seq_len": 784 // c if 784 % c == 0 else "", "acc_mean": _g6(mean_std(v)[0]),
         "acc_std": _g6(mean_std(v)[1]), "n": len(v)}
        for (s, c), v in sorted(seqlen.items())
    ])
    written.append(p)

    sweep: dict[tuple, list[float]] = defaultdict(list)
    for r in records:
        if _key(r, "name") == "replay":
            sweep[(_key(r, "label") or _key(r, "kind"), int(float(_key(r, "P", 0) or 0)))].append(r.acc)
    p = out / "replay_sweep.csv"
    _write_csv(p, ["model", "P", "acc_mean", "acc_std", "n"], [
        {"model": m, "P": P, "acc_mean": _g6(mean_std(v)[0]), "acc_std": _g6(mean_std(v)[1]), "n": len(v)}
        for (m, P), v in sorted(sweep.items())
    ])
    written.append(p)

    timing: dict[tuple, list[float]] = defaultdict(list)
    for r in records:
        timing[(_key(r, "name"), _key(r, "label") or _key(r, "kind"))].append(float(np.sum(r.step_times)))
    p = out / "timing.csv"
    _write_csv(p, ["strategy", "model", "seconds_mean", "seconds_std", "n"], [
        {"strategy": s, "model": m, "seconds_mean": _g6(mean_std(v)[0]), "seconds_std": _g6(mean_std(v)[1]),
         "n": len(v)}
        for (s, m), v in sorted(timing.items())
    ])
    written.append(p)

    if svg:
        written += _charts(out, summary, seqlen, sweep, timing)
    return written


def _charts(out: Path, summary, seqlen, sweep, timing) -> list[Path]:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return []
    matplotlib.rcParams["svg.hashsalt"] = "seqcl"
    files = []

    def save(fig, name):
        path = out / name
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        files.append(path)

    fig, ax = plt.subplots(figsize=(7, 3.5))
    labels = [f"{r['strategy']}\n{r['model']}{'-' + r['chunk'] if r['chunk'] else ''}" for r in summary]
    ax.bar(range(len(summary)), [float(r["acc_mean"]) for r in summary],
           yerr=[float(r["acc_std"]) for r in summary])
    ax.set_xticks(range(len(summary)), labels, fontsize=6)
    ax.set_ylabel("ACC")
    ax.set_ylim(0, 1)
    save(fig, "summary.svg")

    if seqlen:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for s in sorted({k[0] for k in seqlen}):
            pts = sorted((784 // c, float(np.mean(v))) for (name, c), v in seqlen.items() if name == s)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=s)
        ax.set_xlabel("sequence length")
        ax.set_ylabel("ACC")
        ax.legend(fontsize=7)
        save(fig, "seqlen.svg")
    if sweep:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for m in sorted({k[0] for k in sweep}):
            pts = sorted((P, float(np.mean(v))) for (mm, P), v in sweep.items() if mm == m)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=m)
        ax.set_xlabel("replay patterns per class (P)")
        ax.set_ylabel("ACC")
        ax.legend(fontsize=7)
        save(fig, "replay_sweep.svg")
    if timing:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        keys = sorted(timing)
        ax.bar(range(len(keys)), [float(np.mean(timing[k])) for k in keys])
        ax.set_xticks(range(len(keys)), [f"{s}\n{m}" for s, m in keys], fontsize=6)
        ax.set_ylabel("training time (s)")
        save(fig, "timing.svg")
    return files

"""Experiment driver: grid-search selection on the validation stream, then multi-seed assessment.

Every unit of work is a ``Job`` (config, role, seed).  Jobs are pure functions
of their inputs, so they can run in worker processes and be journaled for
resumption; the collector in the calling process writes the journal.
"""
from __future__ import annotations

import copy
import functools
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import config as C
from .errors import ConfigurationError
from .evaluation import RunRecord
from .streams import (
    Dataset,
    Scenario,
    apply_fixed_permutation,
    build_class_incremental,
    build_domain_incremental,
    check_disjoint_steps,
    check_no_leakage,
    holdout_split,
    read_feature_sequences,
    read_strokes,
)
from .streams.mnist import mnist_dataset
from .training import run_stream

log = logging.getLogger(__name__)

FILE_NAMES = {"strokes": ("train.strokes", "test.strokes"), "featureseq": ("train.fseq", "test.fseq")}


# -- scenarios -------------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def _mnist(chunk, data_root, train_per_class, test_per_class, subsample_seed) -> Dataset:
    return mnist_dataset(chunk, data_root, train_per_class, test_per_class, subsample_seed)


@functools.lru_cache(maxsize=8)
def _file_dataset(benchmark: str, path: str) -> Dataset:
    reader = read_strokes if benchmark == "strokes" else read_feature_sequences
    tr, te = FILE_NAMES[benchmark]
    root = Path(path)
    return Dataset(f"{benchmark}:{root.name}", reader(root / tr), reader(root / te))


@dataclass(frozen=True)
class ScenarioSpec:
    """The ``[data]`` section: which benchmark, how it is cut into steps, and the selection split."""

    benchmark: str = "smnist"
    chunk: int = 28
    num_steps: int = 5
    classes_per_step: int = 2
    class_order: tuple | None = None
    scenario_seed: int | None = None
    fixed_permutation_seed: int | None = 1
    multi_task: bool = False
    train_per_class: int | None = None
    test_per_class: int | None = None
    subsample_seed: int = 0
    data_root: str | None = None
    path: str | None = None
    validation_steps: int = 3
    same_stream: bool | None = None

    @classmethod
    def from_config(cls, cfg: dict) -> ScenarioSpec:
        d = dict(cfg["data"])
        if d.get("class_order") is not None:
            d["class_order"] = tuple(d["class_order"])
        return cls(**d)

    @property
    def shared_stream(self) -> bool:
        """SMNIST is too short to split, so selection and assessment share its stream."""
        return self.benchmark == "smnist" if self.same_stream is None else bool(self.same_stream)

    @property
    def total_steps(self) -> int:
        return self.num_steps if self.shared_stream else self.validation_steps + self.num_steps

    def dataset(self) -> Dataset:
        if self.benchmark in ("smnist", "pmnist"):
            return _mnist(self.chunk, self.data_root, self.train_per_class, self.test_per_class,
                          self.subsample_seed)
        return _file_dataset(self.benchmark, str(self.path))

    def build(self) -> Scenario:
        """The full stream, before the selection split."""
        ds = self.dataset()
        if self.benchmark == "pmnist":
            return build_domain_incremental(ds, self.total_steps, 0 if self.scenario_seed is None else self.scenario_seed)
        sc = build_class_incremental(ds, self.classes_per_step, self.total_steps, self.class_order,
                                     self.scenario_seed, self.multi_task)
        if self.benchmark == "smnist" and self.fixed_permutation_seed is not None:
            sc = apply_fixed_permutation(sc, self.fixed_permutation_seed)
        return sc

    def split(self) -> tuple[Scenario, Scenario]:
        full = self.build()
        check_disjoint_steps(full)
        val, assess = holdout_split(full, self.validation_steps, self.shared_stream)
        check_no_leakage(val, assess)
        return val, assess


# -- grids -------------------------------------------------------------------

def _point_id(point: dict) -> str:
    return json.dumps(point, sort_keys=True)


def _value_key(v):
    if isinstance(v, (bool, int, float)):
        return (0, float(v), "")
    if isinstance(v, str):
        return (1, 0.0, v)
    return (2, 0.0, json.dumps(v, sort_keys=True))


def _order_key(point: dict) -> tuple:
    """Canonical order: key by key, numbers numerically, then strings, then anything else."""
    return tuple((k, _value_key(point[k])) for k in sorted(point))


@dataclass
class GridSpec:
    """Dotted keys (``strategy.lam``, ``train.lr`` ...) mapped to candidate value lists."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, vals in self.values.items():
            if not isinstance(vals, (list, tuple)) or not vals:
                raise ConfigurationError(f"grid.{key}: needs a nonempty list of values")

    def __len__(self) -> int:
        n = 1
        for vals in self.values.values():
            n *= len(vals)
        return n

    def points(self) -> list[dict]:
        """Cartesian product in canonical (sorted) order; one empty point for an empty grid."""
        keys = sorted(self.values)
        pts = [dict(zip(keys, combo)) for combo in itertools.product(*(self.values[k] for k in keys))]
        return sorted(pts, key=_order_key)


@dataclass
class ExperimentPlan:
    config: dict
    grid: GridSpec
    seeds: list[int]

    @classmethod
    def from_config(cls, cfg: dict) -> ExperimentPlan:
        C.validate(cfg)
        base = copy.deepcopy(cfg)
        grid = GridSpec(dict(base.pop("grid", {}) or {}))
        base["grid"] = {}
        plan = cls(base, grid, C.seed_list(cfg))
        for p in grid.points():
            C.validate(plan.config_for(p))
        return plan

    @property
    def scenario(self) -> ScenarioSpec:
        return ScenarioSpec.from_config(self.config)

    def config_for(self, point: dict) -> dict:
        return C.apply_overrides(self.config, point)

    @property
    def needs_selection(self) -> bool:
        return len(self.grid.values) > 0


# -- jobs and journal -------------------------------------------------------------

@dataclass(frozen=True)
class Job:
    role: str  # "validation" or "assessment"
    point: str  # canonical JSON of the grid point
    seed: int

    @property
    def key(self) -> str:
        return f"{self.role}|{self.point}|{self.seed}"


@functools.lru_cache(maxsize=4)
def _split_cached(spec: ScenarioSpec) -> tuple[Scenario, Scenario]:
    return spec.split()


def execute(cfg: dict, role: str, seed: int, point: dict | None = None) -> RunRecord:
    """Run one job: train continually on the ``role`` stream of ``cfg`` with ``seed``."""
    val, assess = _split_cached(ScenarioSpec.from_config(cfg))
    scenario = val if role == "validation" else assess
    if len(scenario) == 0:
        raise ConfigurationError(f"the {role} stream is empty")
    rec = run_stream(scenario, C.model_spec(cfg), C.strategy_config(cfg), C.train_config(cfg), seed,
                     config_snapshot=copy.deepcopy(cfg))
    rec.diagnostics["role"] = role
    rec.diagnostics["grid_point"] = point or {}
    return rec


def _execute_job(args) -> tuple[str, dict]:
    cfg, job = args
    return job.key, execute(cfg, job.role, job.seed, json.loads(job.point)).to_dict()


class Journal:
    """Append-only JSONL record of finished jobs; reloading skips them on resume."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.done: dict[str, RunRecord] = {}
        if self.path is not None and self.path.exists():
            with open(self.path) as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        entry = json.loads(line)
                    except json.JSONDecodeError:
                        log.warning("ignoring a truncated journal line in %s", self.path)
                        continue
                    self.done[entry["key"]] = RunRecord.from_dict(entry["record"])

    def add(self, key: str, record: RunRecord) -> None:
        self.done[key] = record
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps({"key": key, "record": record.to_dict()}, sort_keys=True) + "\n")


def run_jobs(plan_cfgs: list[tuple[dict, Job]], journal: Journal, jobs: int = 1) -> list[RunRecord]:
    """Run every (config, job) pair not already in the journal; results in input order."""
    todo = [(cfg, job) for cfg, job in plan_cfgs if job.key not in journal.done]
    if todo:
        log.info("%d jobs to run (%d already journaled)", len(todo), len(plan_cfgs) - len(todo))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for key, rec in pool.map(_execute_job, todo):
                journal.add(key, RunRecord.from_dict(rec))
    else:
        for cfg, job in todo:
            journal.add(job.key, execute(cfg, job.role, job.seed, json.loads(job.point)))
    return [journal.done[job.key] for _, job in plan_cfgs]


# -- selection and assessment --------------------------------------------------

@dataclass
class Selection:
    point: dict
    config: dict
    acc: float
    table: list[dict]  # one row per grid point: point, acc, num_parameters, rank


def _params(rec: RunRecord) -> int:
    return int(rec.diagnostics.get("num_parameters", 0))


def grid_search(plan: ExperimentPlan, journal: Journal | None = None, jobs: int = 1) -> Selection:
    """Train every grid point on the validation stream and keep the best by ACC.

    Ties go to the smaller model, then to the first point in canonical order.
    """
    if not plan.needs_selection:
        raise ConfigurationError("grid search needs a nonempty grid")
    journal = journal or Journal()
    seed = int(plan.config["run"]["selection_seed"])
    points = plan.grid.points()
    work = [(plan.config_for(p), Job("validation", _point_id(p), seed)) for p in points]
    records = run_jobs(work, journal, jobs)
    ranked = sorted(range(len(points)), key=lambda i: (-records[i].acc, _params(records[i]), i))
    table = [{"point": points[i], "acc": records[i].acc, "num_parameters": _params(records[i]),
              "rank": ranked.index(i) + 1} for i in range(len(points))]
    best = ranked[0]
    return Selection(points[best], work[best][0], records[best].acc, table)


def run_assessment(cfg: dict, seeds, journal: Journal | None = None, jobs: int = 1,
                   point: dict | None = None) -> list[RunRecord]:
    """One continual run per seed on the assessment stream of ``cfg``."""
    journal = journal or Journal()
    key = _point_id(point or {})
    return run_jobs([(cfg, Job("assessment", key, int(s))) for s in seeds], journal, jobs)


def run_plan(plan: ExperimentPlan, journal: Journal | None = None,
             jobs: int = 1) -> tuple[Selection | None, list[RunRecord]]:
    """Select (when the plan has a grid), then assess the chosen config over every seed."""
    journal = journal or Journal()
    selection = None
    cfg, point = plan.config, {}
    if plan.needs_selection:
        selection = grid_search(plan, journal, jobs)
        cfg, point = selection.config, selection.point
        log.info("selected %s (validation ACC %.4f)", point, selection.acc)
    return selection, run_assessment(cfg, plan.seeds, journal, jobs, point)

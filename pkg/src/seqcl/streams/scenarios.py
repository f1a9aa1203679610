"""Continual-learning streams built from a labelled dataset.

A scenario is fully described by its manifest (class-to-step assignment,
input permutations, split role) plus the raw data, so ``rebuild`` can
reproduce it exactly.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, ProtocolError
from ..sequences import SequenceBatch

MANIFEST_VERSION = 1
SCENARIO_KINDS = ("SIT+NC", "SIT+NI", "MT+NC")


@dataclass
class Dataset:
    name: str
    train: SequenceBatch
    test: SequenceBatch

    def classes(self) -> list[int]:
        return sorted(set(self.train.classes()) | set(self.test.classes()))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for part in (self.train, self.test):
            for arr in (part.x, part.lengths, part.targets):
                h.update(np.ascontiguousarray(arr).tobytes())
                h.update(str(arr.shape).encode())
        return h.hexdigest()


@dataclass
class Step:
    index: int
    task_label: int
    train: SequenceBatch
    test: SequenceBatch
    classes_introduced: list[int]


@dataclass
class Scenario:
    steps: list[Step]
    scenario_kind: str
    seed: int
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def multi_task(self) -> bool:
        return self.scenario_kind.startswith("MT")

    def classes(self) -> set[int]:
        return {c for s in self.steps for c in s.classes_introduced}

    @property
    def num_classes(self) -> int:
        return len(self.classes())


# -- manifests ---------------------------------------------------------------

def _new_manifest(kind: str, seed: int, dataset: Dataset) -> dict:
    return {
        "format": "seqcl-manifest",
        "version": MANIFEST_VERSION,
        "scenario_kind": kind,
        "seed": int(seed),
        "source": {
            "name": dataset.name,
            "fingerprint": dataset.fingerprint(),
            "n_train": len(dataset.train),
            "n_test": len(dataset.test),
        },
        "class_order": [],
        "step_classes": [],
        "task_labels": [],
        "permutations": [],
        "fixed_permutation_seed": None,
        "fixed_permutation": None,
        "split": {"role": "full", "num_validation_steps": 0, "same_stream": False, "step_offset": 0},
        "sizes": {"train": [], "test": []},
    }


def save_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> dict:
    manifest = json.loads(Path(path).read_text())
    if manifest.get("format") != "seqcl-manifest":
        raise ConfigurationError(f"{path}: not a scenario manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise ConfigurationError(f"{path}: unsupported manifest version {manifest.get('version')}")
    return manifest


def _permute(batch: SequenceBatch, perm) -> SequenceBatch:
    if perm is None:
        return batch
    perm = np.asarray(perm, dtype=np.int64)
    n, T, d = batch.x.shape
    if not batch.is_fixed_length or perm.size != T * d:
        raise ConfigurationError(f"permutation of size {perm.size} needs fixed-length inputs of {T}x{d}")
    return SequenceBatch(batch.x.reshape(n, -1)[:, perm].reshape(n, T, d), batch.lengths, batch.targets)


def _materialize(manifest: dict, dataset: Dataset) -> list[Step]:
    kind = manifest["scenario_kind"]
    fixed = manifest.get("fixed_permutation")
    steps = []
    for k, classes in enumerate(manifest["step_classes"]):
        classes = [int(c) for c in classes]
        if kind == "SIT+NI":
            train, test = dataset.train, dataset.test
            perm = manifest["permutations"][k]
            train, test = _permute(train, perm), _permute(test, perm)
        else:
            train = dataset.train.subset(np.flatnonzero(np.isin(dataset.train.targets, classes)))
            test = dataset.test.subset(np.flatnonzero(np.isin(dataset.test.targets, classes)))
            if kind == "MT+NC":
                lookup = {c: i for i, c in enumerate(classes)}
                train = train.with_targets([lookup[int(t)] for t in train.targets])
                test = test.with_targets([lookup[int(t)] for t in test.targets])
        if fixed is not None:
            train, test = _permute(train, fixed), _permute(test, fixed)
        steps.append(Step(k, int(manifest["task_labels"][k]), train, test, classes))
    return steps


def rebuild(manifest: dict, dataset: Dataset) -> Scenario:
    """Reconstruct a scenario from its manifest and the raw data it names."""
    if manifest["source"]["fingerprint"] != dataset.fingerprint():
        raise ConfigurationError(
            f"dataset {dataset.name!r} does not match the manifest source {manifest['source']['name']!r}"
        )
    return Scenario(_materialize(manifest, dataset), manifest["scenario_kind"], manifest["seed"], manifest)


def _finish(manifest: dict, dataset: Dataset) -> Scenario:
    steps = _materialize(manifest, dataset)
    manifest["sizes"] = {"train": [len(s.train) for s in steps], "test": [len(s.test) for s in steps]}
    return Scenario(steps, manifest["scenario_kind"], manifest["seed"], manifest)


# -- builders ------------------------------------------------------------------

def build_class_incremental(dataset: Dataset, classes_per_step: int, num_steps: int,
                            class_order=None, seed: int | None = None,
                            multi_task: bool = False) -> Scenario:
    """New classes at every step (SIT+NC), or MT+NC with per-step task labels.

    ``class_order`` pins the order explicitly; otherwise a ``seed`` shuffles
    the classes and ``None`` keeps ascending order.  SIT targets stay global
    class ids; MT targets are re-indexed within each step.
    """
    available = dataset.classes()
    if classes_per_step < 1 or num_steps < 1:
        raise ConfigurationError("classes_per_step and num_steps must be positive")
    if classes_per_step * num_steps > len(available):
        raise ConfigurationError(
            f"{num_steps} steps x {classes_per_step} classes need {classes_per_step * num_steps} classes, "
            f"dataset {dataset.name!r} has {len(available)}"
        )
    if class_order is not None:
        order = [int(c) for c in class_order]
        if len(set(order)) != len(order) or not set(order) <= set(available):
            raise ConfigurationError("class_order must list distinct classes present in the dataset")
    elif seed is not None:
        order = [int(c) for c in np.random.default_rng(seed).permutation(available)]
    else:
        order = list(available)
    kind = "MT+NC" if multi_task else "SIT+NC"
    m = _new_manifest(kind, 0 if seed is None else seed, dataset)
    m["class_order"] = order
    m["step_classes"] = [
        sorted(order[k * classes_per_step : (k + 1) * classes_per_step]) for k in range(num_steps)
    ]
    m["task_labels"] = list(range(num_steps)) if multi_task else [0] * num_steps
    m["permutations"] = [None] * num_steps
    return _finish(m, dataset)


def build_domain_incremental(dataset: Dataset, num_steps: int, seed: int) -> Scenario:
    """Every step sees all classes through its own fixed input permutation (first is identity)."""
    if num_steps < 1:
        raise ConfigurationError("num_steps must be positive")
    size = dataset.train.max_len * dataset.train.feat_dim
    rng = np.random.default_rng(seed)
    m = _new_manifest("SIT+NI", seed, dataset)
    m["class_order"] = dataset.classes()
    m["step_classes"] = [dataset.classes() for _ in range(num_steps)]
    m["task_labels"] = [0] * num_steps
    m["permutations"] = [None] + [rng.permutation(size).tolist() for _ in range(num_steps - 1)]
    return _finish(m, dataset)


def fixed_permutation(size: int, seed: int) -> np.ndarray:
    """Seed 0 is the identity by convention."""
    if seed == 0:
        return np.arange(size)
    return np.random.default_rng(seed).permutation(size)


def apply_fixed_permutation(scenario: Scenario, seed: int, dataset: Dataset | None = None) -> Scenario:
    """Apply one seeded input permutation to every step's train and test inputs."""
    shapes = {(s.train.max_len, s.train.feat_dim) for s in scenario.steps}
    shapes |= {(s.test.max_len, s.test.feat_dim) for s in scenario.steps}
    fixed_len = all(s.train.is_fixed_length and s.test.is_fixed_length for s in scenario.steps)
    if len(shapes) != 1 or not fixed_len:
        raise ConfigurationError("a fixed permutation needs every step to share one fixed input shape")
    (T, d), = shapes
    perm = fixed_permutation(T * d, seed)
    m = json.loads(json.dumps(scenario.manifest))
    prev = m.get("fixed_permutation")
    composed = perm if prev is None else np.asarray(prev)[perm]
    m["fixed_permutation"] = None if seed == 0 and prev is None else composed.tolist()
    m["fixed_permutation_seed"] = seed if prev is None else [m.get("fixed_permutation_seed"), seed]
    steps = [
        Step(s.index, s.task_label, _permute(s.train, perm), _permute(s.test, perm), list(s.classes_introduced))
        for s in scenario.steps
    ]
    return Scenario(steps, scenario.scenario_kind, scenario.seed, m)


def holdout_split(scenario: Scenario, num_validation_steps: int,
                  same_stream: bool = False) -> tuple[Scenario, Scenario]:
    """Split off the first steps for model selection; the rest is the assessment stream.

    ``same_stream`` returns the whole stream for both roles (the documented
    exception for streams that are too short to split).
    """
    if num_validation_steps < 0:
        raise ConfigurationError("num_validation_steps must be >= 0")

    def sub(steps, role, offset):
        m = json.loads(json.dumps(scenario.manifest))
        lo, hi = offset, offset + len(steps)
        for key in ("step_classes", "task_labels", "permutations"):
            m[key] = m[key][lo:hi]
        if scenario.multi_task:
            m["task_labels"] = list(range(len(steps)))
        m["split"] = {"role": role, "num_validation_steps": num_validation_steps,
                      "same_stream": same_stream, "step_offset": offset}
        m["sizes"] = {"train": [len(s.train) for s in steps], "test": [len(s.test) for s in steps]}
        new_steps = [
            Step(i, m["task_labels"][i], s.train, s.test, list(s.classes_introduced))
            for i, s in enumerate(steps)
        ]
        return Scenario(new_steps, scenario.scenario_kind, scenario.seed, m)

    if same_stream:
        return sub(scenario.steps, "validation", 0), sub(scenario.steps, "assessment", 0)
    if num_validation_steps >= len(scenario.steps):
        raise ConfigurationError(
            f"{len(scenario.steps)} steps leave nothing for assessment after {num_validation_steps} validation steps"
        )
    val = sub(scenario.steps[:num_validation_steps], "validation", 0)
    assess = sub(scenario.steps[num_validation_steps:], "assessment", num_validation_steps)
    return val, assess


def check_no_leakage(validation: Scenario, assessment: Scenario) -> None:
    """Raise if validation and assessment streams share a class (unless declared the same stream)."""
    if validation.manifest.get("split", {}).get("same_stream"):
        return
    if validation.scenario_kind == "SIT+NI":
        return
    shared = validation.classes() & assessment.classes()
    if shared:
        raise ProtocolError(f"validation and assessment streams share classes {sorted(shared)}")


def check_disjoint_steps(scenario: Scenario) -> None:
    if scenario.scenario_kind == "SIT+NI":
        return
    seen: set[int] = set()
    for s in scenario.steps:
        overlap = seen & set(s.classes_introduced)
        if overlap:
            raise ProtocolError(f"step {s.index} reintroduces classes {sorted(overlap)}")
        seen |= set(s.classes_introduced)

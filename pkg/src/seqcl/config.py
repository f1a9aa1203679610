"""Run configuration: INI files with dotted ``--set`` overrides, validated up front.

A config is a nested dict ``{section: {key: value}}``.  Files are read with
:mod:`configparser`; values are Python/JSON literals (``1e-3``, ``[0, 1]``,
``true``) or bare strings.
"""
from __future__ import annotations

import ast
import configparser
import copy
import json
from dataclasses import fields
from pathlib import Path

from .errors import ConfigurationError
from .strategies import StrategyConfig
from .training import ModelSpec, TrainConfig, schedule

BENCHMARKS = ("smnist", "pmnist", "strokes", "featureseq")

DATA_DEFAULTS = {
    "benchmark": "smnist",
    "chunk": 28,
    "num_steps": 5,
    "classes_per_step": 2,
    "class_order": None,
    "scenario_seed": None,
    "fixed_permutation_seed": 1,
    "multi_task": False,
    "train_per_class": None,
    "test_per_class": None,
    "subsample_seed": 0,
    "data_root": None,
    "path": None,
    "validation_steps": 3,
    "same_stream": None,  # None: on for smnist only
}

RUN_DEFAULTS = {
    "seeds": 5,
    "selection_seed": 0,
    "jobs": 1,
    "output_dir": "runs",
    "svg": True,
}


def _defaults(cls) -> dict:
    # declared defaults, before __post_init__ resolves anything (e.g. online_regime stays None)
    return {f.name: copy.deepcopy(f.default) for f in fields(cls)}


def default_config() -> dict:
    return {
        "data": dict(DATA_DEFAULTS),
        "strategy": _defaults(StrategyConfig),
        "model": _defaults(ModelSpec),
        "train": _defaults(TrainConfig),
        "run": dict(RUN_DEFAULTS),
        "grid": {},
    }


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    try:
        return json.loads(text)
    except ValueError:
        pass
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def set_key(cfg: dict, dotted: str, value) -> None:
    section, _, key = dotted.partition(".")
    if not key:
        raise ConfigurationError(f"override {dotted!r} must look like section.key")
    if section not in cfg:
        raise ConfigurationError(f"unknown config section {section!r} in {dotted!r}")
    cfg[section][key] = value


def apply_overrides(cfg: dict, overrides) -> dict:
    """``overrides`` is a list of ``key=value`` strings or a dict of dotted keys."""
    cfg = copy.deepcopy(cfg)
    items = overrides.items() if isinstance(overrides, dict) else (_split(o) for o in overrides)
    for key, value in items:
        if key == "seeds":  # convenience alias used by sweep scripts
            key = "run.seeds"
        set_key(cfg, key, parse_value(value) if isinstance(value, str) else value)
    return cfg


def _split(item: str) -> tuple[str, str]:
    key, sep, value = item.partition("=")
    if not sep:
        raise ConfigurationError(f"override {item!r} must be key=value")
    return key.strip(), value


def load_config(path, overrides=()) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigurationError(f"{path}: {e}") from None
    cfg = default_config()
    for section in parser.sections():
        if section not in cfg:
            raise ConfigurationError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            cfg[section][key] = parse_value(raw)
    cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def save_config(cfg: dict, path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in cfg.items():
        parser[section] = {k: json.dumps(v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def validate(cfg: dict) -> None:
    """Reject unknown keys and bad values before anything runs; errors name every offending field."""
    errors = []
    known = default_config()
    for section, values in cfg.items():
        if section not in known:
            errors.append(f"unknown section {section!r}")
            continue
        if section == "grid":
            for key, vals in values.items():
                sec, _, name = key.partition(".")
                if sec not in ("strategy", "model", "train") or name not in known[sec]:
                    errors.append(f"grid.{key}: not a tunable strategy/model/train field")
                elif not isinstance(vals, list) or not vals:
                    errors.append(f"grid.{key}: needs a nonempty list of values")
            continue
        for key in values:
            if key not in known[section]:
                errors.append(f"{section}.{key}: unknown key")
    if errors:
        raise ConfigurationError("; ".join(errors))
    d = cfg["data"]
    if d["benchmark"] not in BENCHMARKS:
        errors.append(f"data.benchmark: must be one of {BENCHMARKS}, got {d['benchmark']!r}")
    if d["benchmark"] in ("strokes", "featureseq"):
        if not d["path"]:
            errors.append("data.path: required for file-based benchmarks")
        elif not Path(d["path"]).exists():
            errors.append(f"data.path: {d['path']} does not exist")
    if d["benchmark"] in ("smnist", "pmnist"):
        if not isinstance(d["chunk"], int) or d["chunk"] < 1 or 784 % d["chunk"]:
            errors.append(f"data.chunk: must divide 784, got {d['chunk']!r}")
        if d["data_root"] is not None and not Path(d["data_root"]).exists():
            errors.append(f"data.data_root: {d['data_root']} does not exist")
    for key in ("num_steps", "classes_per_step"):
        if not isinstance(d[key], int) or d[key] < 1:
            errors.append(f"data.{key}: must be a positive integer")
    if not isinstance(d["validation_steps"], int) or d["validation_steps"] < 0:
        errors.append("data.validation_steps: must be a non-negative integer")
    r = cfg["run"]
    seeds = r["seeds"]
    if not (isinstance(seeds, int) and seeds >= 1) and not (isinstance(seeds, list) and seeds):
        errors.append("run.seeds: must be a positive count or a list of seeds")
    if not isinstance(r["jobs"], int) or r["jobs"] < 1:
        errors.append("run.jobs: must be a positive integer")
    built = {}
    for section, builder in (("strategy", strategy_config), ("model", model_spec), ("train", train_config)):
        try:
            built[section] = builder(cfg)
        except (ConfigurationError, TypeError, ValueError) as e:
            errors.append(f"{section}: {e}")
    if "strategy" in built and "train" in built:
        try:
            schedule(built["strategy"], built["train"])
        except ConfigurationError as e:
            errors.append(f"train: {e}")
    if errors:
        raise ConfigurationError("; ".join(errors))


def strategy_config(cfg: dict) -> StrategyConfig:
    return StrategyConfig(**cfg["strategy"])


def model_spec(cfg: dict) -> ModelSpec:
    spec = ModelSpec(**cfg["model"])
    if spec.kind not in ("mlp", "lstm"):
        raise ConfigurationError(f"kind must be 'mlp' or 'lstm', got {spec.kind!r}")
    if spec.head_mode not in ("single", "multi"):
        raise ConfigurationError(f"head_mode must be 'single' or 'multi', got {spec.head_mode!r}")
    if spec.hidden_size < 1 or spec.num_layers < 1:
        raise ConfigurationError("hidden_size and num_layers must be >= 1")
    return spec


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def seed_list(cfg: dict) -> list[int]:
    seeds = cfg["run"]["seeds"]
    return list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]

"""The training loop shared by every strategy, plus the Joint baseline."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError
from .evaluation import AccuracyMatrix, RunRecord, accuracy
from .models import Classifier, ModelConfig
from .optim import make_optimizer
from .sequences import SequenceBatch
from .strategies import ONLINE, LossContext, Strategy, StrategyConfig, make_strategy
from .streams.scenarios import Scenario

log = logging.getLogger(__name__)

ONLINE_EPOCHS, ONLINE_BATCH = 2, 10


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    optimizer: str = "adam"
    max_epochs: int = 20
    target_train_acc: float = 0.99
    epochs: int | None = None  # fixed epoch count; disables the convergence rule
    clip_norm: float = 5.0
    mask_unseen: bool = True
    online_epochs: int = ONLINE_EPOCHS
    online_batch_size: int = ONLINE_BATCH
    allow_offline_gem: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"train.lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("train.batch_size and train.max_epochs must be >= 1")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigurationError("train.epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"train.optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not 0 < self.clip_norm:
            raise ConfigurationError("train.clip_norm must be > 0")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ModelSpec:
    """Model settings that do not depend on the data shape."""

    kind: str = "lstm"
    hidden_size: int = 128
    num_layers: int = 1
    head_mode: str = "single"
    label: str = ""

    def build_config(self, scenario: Scenario, extra_features: int = 0) -> ModelConfig:
        probe = scenario.steps[0].train
        d = probe.feat_dim + extra_features
        input_size = d if self.kind == "lstm" else probe.max_len * d
        if self.head_mode == "single":
            n_out = max(scenario.classes()) + 1
        else:
            n_out = max(len(s.classes_introduced) for s in scenario.steps)
        try:
            return ModelConfig(self.kind, input_size, self.hidden_size, self.num_layers, self.head_mode, n_out)
        except ValueError as e:
            raise ConfigurationError(f"model: {e}") from None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def schedule(strategy_cfg: StrategyConfig, train_cfg: TrainConfig) -> tuple[int | None, int]:
    """(fixed epoch count, or None for the convergence rule; minibatch size)."""
    guarded = strategy_cfg.name in ONLINE and not train_cfg.allow_offline_gem
    if strategy_cfg.online_regime:
        if guarded and (train_cfg.online_epochs, train_cfg.online_batch_size) != (ONLINE_EPOCHS, ONLINE_BATCH):
            raise ConfigurationError(
                f"{strategy_cfg.name} runs {ONLINE_EPOCHS} epochs of minibatch {ONLINE_BATCH}; "
                "set train.allow_offline_gem to change them"
            )
        return train_cfg.online_epochs, train_cfg.online_batch_size
    if guarded:
        raise ConfigurationError(
            f"{strategy_cfg.name} must run in the online regime; set train.allow_offline_gem to override"
        )
    return train_cfg.epochs, train_cfg.batch_size


def _class_mask(n_out: int, classes) -> np.ndarray:
    mask = np.zeros(n_out, dtype=bool)
    mask[sorted(classes)] = True
    return mask


def train_step(model: Classifier, strategy: Strategy, optimizer, train_set: SequenceBatch, tasks: np.ndarray,
               step_index: int, ctx: LossContext, epochs: int | None, batch_size: int, train_cfg: TrainConfig,
               rng: np.random.Generator) -> dict:
    """Train on one step; returns the number of epochs run and the last running train accuracy."""
    params = model.parameters()
    max_epochs = epochs if epochs is not None else train_cfg.max_epochs
    n_batches = max(1, -(-len(train_set) // batch_size))
    run_acc, epoch = 0.0, 0
    for epoch in range(1, max_epochs + 1):
        ctx.correct = ctx.seen = 0
        for idx in np.array_split(rng.permutation(len(train_set)), n_batches):
            mb, mb_tasks = strategy.augment(train_set.subset(idx), tasks[idx], step_index)
            model.zero_grad()
            ctx.track = True
            loss = strategy.loss(model, mb, mb_tasks, step_index, ctx)
            ctx.track = False
            loss.backward()
            strategy.transform_grad(model, step_index, ctx)
            ad.clip_grad_norm(params, train_cfg.clip_norm)
            optimizer.step()
        run_acc = ctx.correct / max(ctx.seen, 1)
        if epochs is None and run_acc >= train_cfg.target_train_acc:
            break
    model.zero_grad()
    return {"epochs": epoch, "train_acc": run_acc}


def _evaluate(model, strategy, scenario, upto: int, mask, multi_head: bool, row: int, R: AccuracyMatrix,
              cache: dict) -> None:
    for t in range(upto + 1):
        step = scenario.steps[t]
        if t not in cache:
            cache[t] = strategy.transform_input(step.test, t, step.task_label if multi_head else None, False)
        R.record(row, t, accuracy(model, cache[t], step.task_label if multi_head else None,
                                  None if multi_head else mask))


def run_stream(scenario: Scenario, model_spec: ModelSpec, strategy_cfg: StrategyConfig, train_cfg: TrainConfig,
               seed: int = 0, config_snapshot: dict | None = None) -> RunRecord:
    """Train one model continually over ``scenario`` and record the accuracy matrix."""
    if strategy_cfg.name == "joint":
        return joint_train(scenario, model_spec, train_cfg, seed, config_snapshot)
    multi_head = model_spec.head_mode == "multi"
    if multi_head and not scenario.multi_task:
        raise ConfigurationError("multi-head models need a multi-task scenario")
    epochs, batch_size = schedule(strategy_cfg, train_cfg)
    strategy = make_strategy(strategy_cfg, seed)
    strategy.prepare(len(scenario))
    model = Classifier(model_spec.build_config(scenario, strategy.extra_features()), seed)
    optimizer = make_optimizer(train_cfg.optimizer, [], train_cfg.lr)
    rng = np.random.default_rng([seed, 3])
    ctx = LossContext(multi_head)
    R = AccuracyMatrix(len(scenario))
    seen_classes: set[int] = set()
    step_times, step_stats = [], []
    cache: dict = {}
    for i, step in enumerate(scenario.steps):
        t0 = time.perf_counter()
        if multi_head:
            model.add_head(step.task_label, len(step.classes_introduced))
        else:
            seen_classes |= set(step.classes_introduced)
            ctx.mask = _class_mask(model.config.num_classes_total, seen_classes) if train_cfg.mask_unseen else None
        # fresh moment estimates at every step boundary
        optimizer = make_optimizer(train_cfg.optimizer, model.parameters(), train_cfg.lr)
        tasks = np.full(len(step.train), step.task_label, dtype=np.int64)
        train_set = strategy.transform_input(step.train, i, step.task_label, True)
        stats = train_step(model, strategy, optimizer, train_set, tasks, i, ctx, epochs, batch_size, train_cfg, rng)
        strategy.end_step(model, train_set, tasks, i, ctx)
        step_times.append(time.perf_counter() - t0)
        step_stats.append(stats)
        _evaluate(model, strategy, scenario, i, ctx.mask, multi_head, i, R, cache)
        log.info("step %d: %s epochs=%d train_acc=%.3f R=%s", i, strategy_cfg.name, stats["epochs"],
                 stats["train_acc"], np.round(R.row(i)[: i + 1], 3).tolist())
    R.validate()
    diagnostics = dict(strategy.diagnostics)
    diagnostics["epochs"] = [s["epochs"] for s in step_stats]
    diagnostics["train_acc"] = [s["train_acc"] for s in step_stats]
    diagnostics["num_parameters"] = model.num_parameters()
    snapshot = config_snapshot or {"strategy": strategy_cfg.to_dict(), "model": model_spec.to_dict(),
                                   "train": train_cfg.to_dict()}
    return RunRecord(snapshot, seed, R, step_times, diagnostics)


def joint_train(scenario: Scenario, model_spec: ModelSpec, train_cfg: TrainConfig, seed: int = 0,
                config_snapshot: dict | None = None) -> RunRecord:
    """Offline training on the union of every step; only the last row of R is filled."""
    multi_head = model_spec.head_mode == "multi"
    model = Classifier(model_spec.build_config(scenario), seed)
    rng = np.random.default_rng([seed, 3])
    ctx = LossContext(multi_head)
    strategy = make_strategy(StrategyConfig("joint"), seed)
    t0 = time.perf_counter()
    if multi_head:
        for step in scenario.steps:
            model.add_head(step.task_label, len(step.classes_introduced))
    elif train_cfg.mask_unseen:
        ctx.mask = _class_mask(model.config.num_classes_total, scenario.classes())
    optimizer = make_optimizer(train_cfg.optimizer, model.parameters(), train_cfg.lr)
    union = SequenceBatch.concat([s.train for s in scenario.steps])
    tasks = np.concatenate([np.full(len(s.train), s.task_label, dtype=np.int64) for s in scenario.steps])
    stats = train_step(model, strategy, optimizer, union, tasks, 0, ctx, train_cfg.epochs, train_cfg.batch_size,
                       train_cfg, rng)
    T = len(scenario)
    R = AccuracyMatrix(T)
    _evaluate(model, strategy, scenario, T - 1, ctx.mask, multi_head, T - 1, R, {})
    R.validate()
    snapshot = config_snapshot or {"strategy": StrategyConfig("joint").to_dict(), "model": model_spec.to_dict(),
                                   "train": train_cfg.to_dict()}
    return RunRecord(snapshot, seed, R, [time.perf_counter() - t0],
                     {"epochs": [stats["epochs"]], "train_acc": [stats["train_acc"]],
                      "num_parameters": model.num_parameters()})

"""Continual-learning strategies as hooks around the training loop.

Every strategy sees the same loop: optional input transform, minibatch
augmentation, a loss (plain CE plus whatever the strategy adds), a gradient
transform after backward, and a state update at the end of each step.
"""
from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import qpsolver
from .autodiff import Tensor
from .errors import ConfigurationError, ProtocolError
from .sequences import SequenceBatch

log = logging.getLogger(__name__)

STRATEGIES = ("naive", "joint", "ewc", "mas", "lwf", "gem", "agem", "replay")
ONLINE = ("gem", "agem")


@dataclass
class StrategyConfig:
    name: str = "naive"
    lam: float | list[float] = 0.0
    temperature: float = 1.0
    gamma: float = 0.5
    patterns_per_step: int = 128
    sample_size: int = 256
    K: int = 20
    P: int = 5
    online_regime: bool | None = None
    fisher_batching: str = "minibatch"
    fisher_batch_size: int = 64
    agem_unconditional: bool = False
    task_vector: bool = True

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ConfigurationError(f"strategy.name must be one of {STRATEGIES}, got {self.name!r}")
        lams = self.lam if isinstance(self.lam, (list, tuple)) else [self.lam]
        if any(not np.isfinite(v) or v < 0 for v in lams):
            raise ConfigurationError(f"strategy.lam must be >= 0, got {self.lam}")
        if isinstance(self.lam, tuple):
            self.lam = list(self.lam)
        if not self.temperature > 0:
            raise ConfigurationError(f"strategy.temperature must be > 0, got {self.temperature}")
        for key in ("patterns_per_step", "sample_size", "K", "P", "fisher_batch_size"):
            if getattr(self, key) < 0:
                raise ConfigurationError(f"strategy.{key} must be >= 0")
        if self.fisher_batching not in ("per-pattern", "minibatch"):
            raise ConfigurationError("strategy.fisher_batching must be 'per-pattern' or 'minibatch'")
        if self.online_regime is None:
            self.online_regime = self.name in ONLINE
        # ranges explored in the reference grids; values outside still run
        if self.name in ("ewc", "mas", "lwf") and max(lams) > 1e4:
            warnings.warn(f"lambda={max(lams)} is outside the usual grid range", stacklevel=2)
        if self.name == "lwf" and not 0.5 <= self.temperature <= 2.0:
            warnings.warn(f"temperature={self.temperature} is outside the usual grid range [0.5, 2]", stacklevel=2)

    def lam_at(self, step: int) -> float:
        """Penalty weight for ``step``; a list is indexed by step count, clamped at its end."""
        if isinstance(self.lam, list):
            return float(self.lam[min(step, len(self.lam) - 1)])
        return float(self.lam)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- loss plumbing -------------------------------------------------------------

@dataclass
class LossContext:
    """How the current run turns a minibatch into a loss.

    ``tasks`` holds one task label per pattern.  Single-head models ignore it
    and apply ``mask`` (classes seen so far) to their one head.
    """

    multi_head: bool
    mask: np.ndarray | None = None
    track: bool = False
    correct: int = 0
    seen: int = 0

    def groups(self, tasks: np.ndarray):
        if not self.multi_head:
            yield None, np.arange(len(tasks))
            return
        for t in np.unique(tasks):
            yield int(t), np.flatnonzero(tasks == t)

    def logits(self, model, batch: SequenceBatch, task):
        return model.forward(batch, task)

    def ce(self, model, batch: SequenceBatch, tasks: np.ndarray) -> Tensor:
        n = len(batch)
        total = None
        for task, idx in self.groups(tasks):
            sub = batch if len(idx) == n else batch.subset(idx)
            mask = None if self.multi_head else self.mask
            logits = model.forward(sub, task)
            term = ad.cross_entropy(logits, sub.targets, mask)
            if self.track:
                z = logits.data if mask is None else np.where(mask, logits.data, -np.inf)
                self.correct += int((z.argmax(axis=1) == sub.targets).sum())
                self.seen += len(sub)
            if len(idx) != n:
                term = term * (len(idx) / n)
            total = term if total is None else total + term
        return total


def _grad_of(model, loss: Tensor) -> np.ndarray:
    model.zero_grad()
    loss.backward()
    return ad.flat_grad(model.parameters())


# -- importance-based regularization -----------------------------------------

def ewc_importance(model, train_set: SequenceBatch, ctx: LossContext, tasks=None,
                   batching: str = "minibatch", batch_size: int = 64) -> dict[str, np.ndarray]:
    """Diagonal Fisher: mean squared gradient of the log-likelihood of the true class.

    ``per-pattern`` squares each pattern's gradient; ``minibatch`` squares
    the mean gradient of each minibatch.
    """
    if len(train_set) == 0:
        raise ProtocolError("EWC importance needs a nonempty training set")
    tasks = np.zeros(len(train_set), dtype=np.int64) if tasks is None else np.asarray(tasks)
    size = 1 if batching == "per-pattern" else batch_size
    named = model.named_parameters()
    acc = {name: np.zeros_like(p.data) for name, p in named}
    count = 0
    for start in range(0, len(train_set), size):
        idx = np.arange(start, min(start + size, len(train_set)))
        model.zero_grad()
        ctx.ce(model, train_set.subset(idx), tasks[idx]).backward()
        for name, p in named:
            if p.grad is not None:
                acc[name] += p.grad**2
        count += 1
    model.zero_grad()
    return {name: a / count for name, a in acc.items()}


def importance_penalty(named_params, omegas, lam: float) -> Tensor | None:
    """``lam * sum_t sum_theta omega_t (anchor_t - theta)^2``; ``None`` when it is identically 0.

    ``omegas`` is a list of ``(omega, anchor)`` pairs, each a dict keyed by
    parameter name.  Parameters absent from a pair (e.g. heads added later)
    are not penalized by it.
    """
    if lam == 0 or not omegas:
        return None
    total = None
    for name, p in named_params:
        for omega, anchor in omegas:
            if name not in omega:
                continue
            diff = p - Tensor(anchor[name])
            term = (Tensor(omega[name]) * diff * diff).sum()
            total = term if total is None else total + term
    return None if total is None else total * lam


def mas_update(omega: dict[str, np.ndarray] | None, n: int,
               contribution: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], int]:
    """One running-average update: ``(n * omega + c) / (n + 1)``."""
    if omega is None or n == 0:
        return {k: v.copy() for k, v in contribution.items()}, 1
    out = {}
    for k, c in contribution.items():
        prev = omega.get(k, np.zeros_like(c))
        out[k] = (n * prev + c) / (n + 1)
    return out, n + 1


def mas_contribution(model, batch: SequenceBatch, ctx: LossContext, tasks=None) -> dict[str, np.ndarray]:
    """``|grad of mean_x ||logits(x)||^2|`` over the active output units; label-free."""
    tasks = np.zeros(len(batch), dtype=np.int64) if tasks is None else np.asarray(tasks)
    model.zero_grad()
    total = None
    for task, idx in ctx.groups(tasks):
        sub = batch if len(idx) == len(batch) else batch.subset(idx)
        out = model.forward(sub, task)
        if not ctx.multi_head and ctx.mask is not None:
            out = out[:, np.flatnonzero(ctx.mask)]
        term = (out * out).sum() * (1.0 / len(batch))
        total = term if total is None else total + term
    total.backward()
    res = {name: np.abs(p.grad) for name, p in model.named_parameters() if p.grad is not None}
    model.zero_grad()
    return res


# -- distillation ----------------------------------------------------------------

def lwf_loss(model, frozen, batch: SequenceBatch, targets_ce: Tensor, lam: float, temperature: float,
             ctx: LossContext, old_mask=None, old_tasks=()) -> Tensor:
    """CE plus ``lam * KL(softmax(frozen/T) || softmax(current/T))`` on ``batch``.

    Single head: KL over the output units that existed when ``frozen`` was
    saved (``old_mask``).  Multi head: one KL term per old head.
    """
    if frozen is None or lam == 0:
        return targets_ce
    if ctx.multi_head:
        feats = model.features(batch)
        with ad.no_grad():
            ffeats = frozen.features(batch)
        kl = None
        for t in old_tasks:
            w, b = model.heads[t]
            fw, fb = frozen.heads[t]
            cur = ad.matmul(feats, w) + b
            ref = ffeats.data @ fw.data + fb.data
            term = ad.kl_divergence(ref, cur, temperature)
            kl = term if kl is None else kl + term
        if kl is None:
            return targets_ce
    else:
        with ad.no_grad():
            ref = frozen.forward(batch).data
        kl = ad.kl_divergence(ref, model.forward(batch), temperature, old_mask)
    return targets_ce + kl * lam


# -- gradient projections ------------------------------------------------------

def gem_project(g: np.ndarray, G: np.ndarray, gamma: float, diagnostics: dict | None = None) -> np.ndarray:
    """``argmin ||g - z||^2 / 2`` subject to ``G z >= gamma``; falls back to ``g`` on solver failure."""
    if G.size == 0:
        return g
    G = np.atleast_2d(G)
    if np.all(G @ g >= gamma):
        return g
    inst = qpsolver.QPInstance(g, G, gamma)
    sol = qpsolver.solve(inst)
    if diagnostics is not None:
        diagnostics["gem_qp_calls"] = diagnostics.get("gem_qp_calls", 0) + 1
    if not sol.converged or not np.all(np.isfinite(sol.z)):
        if diagnostics is not None:
            diagnostics["gem_fallbacks"] = diagnostics.get("gem_fallbacks", 0) + 1
        log.warning("GEM projection fell back to the raw gradient (%s)", sol.notes)
        dump_dir = os.environ.get("SEQCL_QP_DUMP")
        if dump_dir:
            n = diagnostics.get("gem_fallbacks", 0) if diagnostics is not None else 0
            qpsolver.write_dump(os.path.join(dump_dir, f"gem_fallback_{n:04d}.txt"), inst, sol)
        return g
    return sol.z


def agem_project(g: np.ndarray, g_ref: np.ndarray, unconditional: bool = False) -> np.ndarray:
    """Remove the component of ``g`` along ``g_ref`` when they conflict."""
    ref_sq = float(g_ref @ g_ref)
    if ref_sq == 0.0:
        return g
    dot = float(g @ g_ref)
    if dot >= 0 and not unconditional:
        return g
    return g - (dot / ref_sq) * g_ref


# -- replay memory -------------------------------------------------------------

@dataclass
class ReplayBuffer:
    """Per-class store of at most ``K`` patterns, kept as a uniform sample of everything offered."""

    K: int
    store: dict[int, tuple[SequenceBatch, np.ndarray]] = field(default_factory=dict)
    seen: dict[int, int] = field(default_factory=dict)

    def add(self, batch: SequenceBatch, tasks: np.ndarray, rng: np.random.Generator) -> None:
        for c in batch.classes():
            idx = np.flatnonzero(batch.targets == c)
            n_new = len(idx)
            old = self.store.get(c)
            n_old = self.seen.get(c, 0)
            keep = min(self.K, n_old + n_new)
            if keep == 0:
                self.seen[c] = n_old + n_new
                continue
            # how many survivors come from the old sample (hypergeometric draw)
            k_old = 0
            if old is not None and n_old > 0:
                k_old = min(int(rng.hypergeometric(n_old, n_new, keep)) if n_new else keep, len(old[0]))
            k_new = min(keep - k_old, n_new)
            parts, part_tasks = [], []
            if k_old:
                sel = np.sort(rng.choice(len(old[0]), size=k_old, replace=False))
                parts.append(old[0].subset(sel))
                part_tasks.append(old[1][sel])
            if k_new:
                sel = np.sort(rng.choice(idx, size=k_new, replace=False))
                parts.append(batch.subset(sel))
                part_tasks.append(np.asarray(tasks)[sel])
            self.store[c] = (SequenceBatch.concat(parts), np.concatenate(part_tasks))
            self.seen[c] = n_old + n_new

    def classes(self) -> list[int]:
        return sorted(c for c, (b, _) in self.store.items() if len(b))

    def sizes(self) -> dict[int, int]:
        return {c: len(b) for c, (b, _) in self.store.items()}

    def sample(self, per_class: int, rng: np.random.Generator):
        """``per_class`` random patterns of every stored class (with replacement if fewer stored)."""
        parts, tasks = [], []
        for c in self.classes():
            b, t = self.store[c]
            sel = rng.choice(len(b), size=per_class, replace=len(b) < per_class)
            parts.append(b.subset(sel))
            tasks.append(t[sel])
        if not parts:
            return None, None
        return SequenceBatch.concat(parts), np.concatenate(tasks)


def replay_store(buffer: ReplayBuffer, train_set: SequenceBatch, rng: np.random.Generator, tasks=None) -> None:
    tasks = np.zeros(len(train_set), dtype=np.int64) if tasks is None else tasks
    buffer.add(train_set, tasks, rng)


def replay_augment(buffer: ReplayBuffer, batch: SequenceBatch, tasks: np.ndarray, P: int,
                   rng: np.random.Generator):
    if P == 0 or not buffer.classes():
        return batch, tasks
    extra, extra_tasks = buffer.sample(P, rng)
    return SequenceBatch.concat([batch, extra]), np.concatenate([tasks, extra_tasks])


# -- strategy objects ------------------------------------------------------------

class Strategy:
    """Naive fine-tuning; the base for every other strategy."""

    def __init__(self, config: StrategyConfig, seed: int = 0):
        self.config = config
        self.rng = np.random.default_rng([seed, 7])
        self.diagnostics: dict = {}
        self.num_steps = 0

    def prepare(self, num_steps: int) -> None:
        self.num_steps = num_steps

    def extra_features(self) -> int:
        return 0

    def transform_input(self, batch: SequenceBatch, step_index: int, task_label, train: bool) -> SequenceBatch:
        return batch

    def augment(self, batch, tasks, step_index):
        return batch, tasks

    def loss(self, model, batch, tasks, step_index, ctx: LossContext) -> Tensor:
        return ctx.ce(model, batch, tasks)

    def transform_grad(self, model, step_index, ctx: LossContext) -> None:
        pass

    def end_step(self, model, train_set, tasks, step_index, ctx: LossContext) -> None:
        pass

    # checkpoint plumbing: a JSON-able record plus named arrays
    def state(self) -> tuple[dict, list[tuple[str, np.ndarray]]]:
        return {"name": self.config.name, "rng": self.rng.bit_generator.state}, []

    def load_state(self, record: dict, tensors: dict[str, np.ndarray]) -> None:
        self.rng.bit_generator.state = record["rng"]


class Naive(Strategy):
    pass


def _omega_tensors(prefix, omega, anchor):
    out = [(f"{prefix}.omega.{k}", v) for k, v in sorted(omega.items())]
    return out + [(f"{prefix}.anchor.{k}", v) for k, v in sorted(anchor.items())]


def _omega_from(prefix, tensors):
    om, an = {}, {}
    for k, v in tensors.items():
        if k.startswith(prefix + ".omega."):
            om[k[len(prefix) + 7 :]] = v
        elif k.startswith(prefix + ".anchor."):
            an[k[len(prefix) + 8 :]] = v
    return om, an


def _snapshot(model) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


class EWC(Strategy):
    def __init__(self, config, seed=0):
        super().__init__(config, seed)
        self.omegas: list[tuple[dict, dict]] = []

    def loss(self, model, batch, tasks, step_index, ctx):
        ce = ctx.ce(model, batch, tasks)
        pen = importance_penalty(model.named_parameters(), self.omegas, self.config.lam_at(step_index))
        return ce if pen is None else ce + pen

    def end_step(self, model, train_set, tasks, step_index, ctx):
        omega = ewc_importance(model, train_set, ctx, tasks, self.config.fisher_batching,
                               self.config.fisher_batch_size)
        self.omegas.append((omega, _snapshot(model)))

    def state(self):
        rec, tens = super().state()
        rec["num_omegas"] = len(self.omegas)
        for i, (om, an) in enumerate(self.omegas):
            tens += _omega_tensors(f"ewc.{i}", om, an)
        return rec, tens

    def load_state(self, record, tensors):
        super().load_state(record, tensors)
        self.omegas = [_omega_from(f"ewc.{i}", tensors) for i in range(record["num_omegas"])]


class MAS(Strategy):
    def __init__(self, config, seed=0):
        super().__init__(config, seed)
        self.omega: dict | None = None
        self.anchor: dict | None = None
        self.n = 0

    def loss(self, model, batch, tasks, step_index, ctx):
        ce = ctx.ce(model, batch, tasks)
        if self.omega is None:
            return ce
        pen = importance_penalty(model.named_parameters(), [(self.omega, self.anchor)],
                                 self.config.lam_at(step_index))
        return ce if pen is None else ce + pen

    def end_step(self, model, train_set, tasks, step_index, ctx):
        bs = self.config.fisher_batch_size or len(train_set)
        for start in range(0, len(train_set), bs):
            idx = np.arange(start, min(start + bs, len(train_set)))
            c = mas_contribution(model, train_set.subset(idx), ctx, np.asarray(tasks)[idx])
            self.omega, self.n = mas_update(self.omega, self.n, c)
        self.anchor = _snapshot(model)

    def state(self):
        rec, tens = super().state()
        rec["n"] = self.n
        if self.omega is not None:
            tens += _omega_tensors("mas", self.omega, self.anchor)
        return rec, tens

    def load_state(self, record, tensors):
        super().load_state(record, tensors)
        self.n = record["n"]
        if self.n:
            self.omega, self.anchor = _omega_from("mas", tensors)


class LwF(Strategy):
    def __init__(self, config, seed=0):
        super().__init__(config, seed)
        self.frozen = None
        self.old_mask = None
        self.old_tasks: list[int] = []

    def loss(self, model, batch, tasks, step_index, ctx):
        ce = ctx.ce(model, batch, tasks)
        if self.frozen is None:
            return ce
        return lwf_loss(model, self.frozen, batch, ce, self.config.lam_at(step_index), self.config.temperature,
                        ctx, self.old_mask, self.old_tasks)

    def end_step(self, model, train_set, tasks, step_index, ctx):
        self.frozen = model.clone()
        self.old_mask = None if ctx.mask is None else np.array(ctx.mask, copy=True)
        self.old_tasks = sorted(model.heads) if ctx.multi_head else []

    def state(self):
        rec, tens = super().state()
        rec["old_tasks"] = self.old_tasks
        if self.frozen is not None:
            tens += [(f"lwf.frozen.{k}", p.data) for k, p in self.frozen.named_parameters()]
            if self.old_mask is not None:
                tens.append(("lwf.old_mask", self.old_mask.astype(np.float64)))
        return rec, tens

    def load_state(self, record, tensors, model=None):
        super().load_state(record, tensors)
        self.old_tasks = list(record["old_tasks"])
        if "lwf.old_mask" in tensors:
            self.old_mask = tensors["lwf.old_mask"].astype(bool)
        if model is not None and any(k.startswith("lwf.frozen.") for k in tensors):
            self.frozen = model.clone()
            for k, p in self.frozen.named_parameters():
                p.data = tensors[f"lwf.frozen.{k}"].copy()


class _Episodic(Strategy):
    """Shared memory handling for GEM and A-GEM: per-step pattern buffers."""

    def __init__(self, config, seed=0):
        super().__init__(config, seed)
        self.memory: list[tuple[SequenceBatch, np.ndarray]] = []

    def end_step(self, model, train_set, tasks, step_index, ctx):
        n = min(self.config.patterns_per_step, len(train_set))
        sel = np.sort(self.rng.choice(len(train_set), size=n, replace=False))
        self.memory.append((train_set.subset(sel), np.asarray(tasks)[sel]))

    def state(self):
        rec, tens = super().state()
        rec["memory_steps"] = len(self.memory)
        for i, (b, t) in enumerate(self.memory):
            tens += [(f"mem.{i}.x", b.x), (f"mem.{i}.lengths", b.lengths.astype(np.float64)),
                     (f"mem.{i}.targets", b.targets.astype(np.float64)), (f"mem.{i}.tasks", t.astype(np.float64))]
        return rec, tens

    def load_state(self, record, tensors):
        super().load_state(record, tensors)
        self.memory = []
        for i in range(record["memory_steps"]):
            b = SequenceBatch(tensors[f"mem.{i}.x"], tensors[f"mem.{i}.lengths"].astype(np.int64),
                              tensors[f"mem.{i}.targets"].astype(np.int64))
            self.memory.append((b, tensors[f"mem.{i}.tasks"].astype(np.int64)))


class GEM(_Episodic):
    def transform_grad(self, model, step_index, ctx):
        if not self.memory:
            return
        params = model.parameters()
        g = ad.flat_grad(params)
        rows = []
        for b, t in self.memory:
            rows.append(_grad_of(model, ctx.ce(model, b, t)))
        z = gem_project(g, np.stack(rows), self.config.gamma, self.diagnostics)
        ad.set_flat_grad(params, z)


class AGEM(_Episodic):
    """A-GEM with a one-hot step vector appended to every input timestep at training time."""

    def extra_features(self) -> int:
        return self.num_steps if self.config.task_vector else 0

    def transform_input(self, batch, step_index, task_label, train):
        k = self.extra_features()
        if k == 0:
            return batch
        onehot = np.zeros((len(batch), batch.max_len, k))
        # class-incremental runs have no task label at test time: zeros there
        code = step_index if train else task_label
        if code is not None:
            onehot[:, :, int(code)] = 1.0
        active = (np.arange(batch.max_len)[None, :] < batch.lengths[:, None])[:, :, None]
        return SequenceBatch(np.concatenate([batch.x, onehot * active], axis=2), batch.lengths, batch.targets)

    def transform_grad(self, model, step_index, ctx):
        if not self.memory:
            return
        pool = SequenceBatch.concat([b for b, _ in self.memory])
        pool_tasks = np.concatenate([t for _, t in self.memory])
        n = min(self.config.sample_size, len(pool))
        sel = np.sort(self.rng.choice(len(pool), size=n, replace=False))
        params = model.parameters()
        g = ad.flat_grad(params)
        g_ref = _grad_of(model, ctx.ce(model, pool.subset(sel), pool_tasks[sel]))
        g_hat = agem_project(g, g_ref, self.config.agem_unconditional)
        if g_hat is not g:
            self.diagnostics["agem_projections"] = self.diagnostics.get("agem_projections", 0) + 1
        ad.set_flat_grad(params, g_hat)


class Replay(Strategy):
    def __init__(self, config, seed=0):
        super().__init__(config, seed)
        self.buffer = ReplayBuffer(config.K)

    def augment(self, batch, tasks, step_index):
        return replay_augment(self.buffer, batch, tasks, self.config.P, self.rng)

    def end_step(self, model, train_set, tasks, step_index, ctx):
        replay_store(self.buffer, train_set, self.rng, np.asarray(tasks))

    def state(self):
        rec, tens = super().state()
        rec["seen"] = {str(k): v for k, v in self.buffer.seen.items()}
        for c, (b, t) in sorted(self.buffer.store.items()):
            tens += [(f"replay.{c}.x", b.x), (f"replay.{c}.lengths", b.lengths.astype(np.float64)),
                     (f"replay.{c}.targets", b.targets.astype(np.float64)),
                     (f"replay.{c}.tasks", t.astype(np.float64))]
        return rec, tens

    def load_state(self, record, tensors):
        super().load_state(record, tensors)
        self.buffer = ReplayBuffer(self.config.K, seen={int(k): v for k, v in record["seen"].items()})
        for key in tensors:
            if key.startswith("replay.") and key.endswith(".x"):
                c = int(key.split(".")[1])
                b = SequenceBatch(tensors[key], tensors[f"replay.{c}.lengths"].astype(np.int64),
                                  tensors[f"replay.{c}.targets"].astype(np.int64))
                self.buffer.store[c] = (b, tensors[f"replay.{c}.tasks"].astype(np.int64))


_CLASSES = {"naive": Naive, "joint": Naive, "ewc": EWC, "mas": MAS, "lwf": LwF, "gem": GEM, "agem": AGEM,
            "replay": Replay}


def make_strategy(config: StrategyConfig, seed: int = 0) -> Strategy:
    return _CLASSES[config.name](config, seed)

"""Padded batches of variable-length feature sequences."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


@dataclass
class SequenceBatch:
    """``x`` is ``n x T x d`` (zero padded past each length); targets are class ids."""

    x: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 3:
            raise ValueError(f"x must be n x T x d, got shape {self.x.shape}")
        self.lengths = np.asarray(self.lengths, dtype=np.int64).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        n = self.x.shape[0]
        if self.lengths.shape != (n,) or self.targets.shape != (n,):
            raise ValueError("lengths and targets need one entry per sequence")
        if n and (self.lengths.min() < 1 or self.lengths.max() > self.x.shape[1]):
            raise ValueError("sequence lengths must lie in [1, T]")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def max_len(self) -> int:
        return self.x.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.x.shape[2]

    @property
    def is_fixed_length(self) -> bool:
        return len(self) == 0 or bool(np.all(self.lengths == self.x.shape[1]))

    @classmethod
    def empty(cls, seq_len: int, feat_dim: int) -> SequenceBatch:
        return cls(np.zeros((0, seq_len, feat_dim)), np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def from_fixed(cls, x: np.ndarray, targets) -> SequenceBatch:
        x = np.asarray(x, dtype=np.float64)
        return cls(x, np.full(x.shape[0], x.shape[1], dtype=np.int64), targets)

    @classmethod
    def from_sequences(cls, seqs: Sequence[np.ndarray], targets, feat_dim: int | None = None) -> SequenceBatch:
        seqs = [np.asarray(s, dtype=np.float64) for s in seqs]
        if not seqs:
            return cls.empty(1, feat_dim or 1)
        d = seqs[0].shape[1]
        T = max(s.shape[0] for s in seqs)
        x = np.zeros((len(seqs), T, d))
        for i, s in enumerate(seqs):
            x[i, : s.shape[0]] = s
        return cls(x, [s.shape[0] for s in seqs], targets)

    def sequences(self) -> list[np.ndarray]:
        return [self.x[i, : self.lengths[i]] for i in range(len(self))]

    def subset(self, idx) -> SequenceBatch:
        idx = np.asarray(idx, dtype=np.int64)
        lengths = self.lengths[idx]
        T = int(lengths.max()) if idx.size else self.max_len
        return SequenceBatch(self.x[idx, :T], lengths, self.targets[idx])

    def with_targets(self, targets) -> SequenceBatch:
        return SequenceBatch(self.x, self.lengths, targets)

    def map_x(self, fn) -> SequenceBatch:
        return SequenceBatch(fn(self.x), self.lengths, self.targets)

    @staticmethod
    def concat(batches: Sequence[SequenceBatch]) -> SequenceBatch:
        batches = [b for b in batches if len(b)]
        if not batches:
            raise ValueError("nothing to concatenate")
        if len({b.feat_dim for b in batches}) != 1:
            raise ValueError("feature dimensions differ")
        T = max(b.max_len for b in batches)
        xs = []
        for b in batches:
            if b.max_len < T:
                pad = np.zeros((len(b), T - b.max_len, b.feat_dim))
                xs.append(np.concatenate([b.x, pad], axis=1))
            else:
                xs.append(b.x)
        return SequenceBatch(
            np.concatenate(xs),
            np.concatenate([b.lengths for b in batches]),
            np.concatenate([b.targets for b in batches]),
        )

    def minibatches(self, size: int, rng: np.random.Generator | None = None) -> Iterator[SequenceBatch]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), size):
            yield self.subset(order[start : start + size])

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.targets))

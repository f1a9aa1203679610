"""Synthetic stand-ins for the speech-feature and drawing benchmarks.

``spectrogram`` sequences are 101 x 40 band patterns; ``stroke`` sequences
are variable-length (8-211) pen trajectories in dx/dy/pen-lift form.  Both
are separable by a nearest-template classifier, which the tests check.
"""
from __future__ import annotations

import numpy as np

from ..sequences import SequenceBatch

SPEC_STEPS, SPEC_BANDS = 101, 40
STROKE_MIN_LEN, STROKE_MAX_LEN = 8, 211
_RESAMPLE_POINTS = 32


def _spectrogram_templates(num_classes: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(SPEC_STEPS)[:, None]
    f = np.arange(SPEC_BANDS)[None, :]
    out = np.zeros((num_classes, SPEC_STEPS, SPEC_BANDS))
    for k in range(num_classes):
        for _ in range(3):
            tc, fc = rng.uniform(15, 86), rng.uniform(3, 37)
            st, sf = rng.uniform(6, 14), rng.uniform(2, 5)
            amp = rng.uniform(1.0, 2.5)
            out[k] += amp * np.exp(-0.5 * ((t - tc) / st) ** 2 - 0.5 * ((f - fc) / sf) ** 2)
    return out


def _stroke_template(rng: np.random.Generator) -> dict:
    return {
        "coef": rng.normal(0.0, 1.0, size=(2, 3, 2)) / np.arange(1, 4)[None, :, None],
        "lifts": np.sort(rng.uniform(0.2, 0.8, size=rng.integers(1, 3))),
    }


def _stroke_points(tpl: dict, s: np.ndarray) -> np.ndarray:
    k = np.arange(1, 4)[None, :]
    ang = 2 * np.pi * s[:, None] * k
    basis = np.stack([np.cos(ang), np.sin(ang)], axis=-1)  # L x 3 x 2
    return np.einsum("lkj,dkj->ld", basis, tpl["coef"])


def _draw_stroke(tpl: dict, rng: np.random.Generator) -> np.ndarray:
    n = int(rng.integers(STROKE_MIN_LEN, STROKE_MAX_LEN + 1))
    s = np.linspace(0.0, 1.0, n)
    pts = _stroke_points(tpl, s) * rng.uniform(0.9, 1.1) + rng.normal(0.0, 0.02, size=(n, 2))
    pts *= 20.0
    deltas = np.diff(pts, axis=0, prepend=np.zeros((1, 2)))
    pen = np.zeros(n)
    for lift in tpl["lifts"]:
        pen[np.searchsorted(s, lift) - 1] = 1.0
    pen[-1] = 1.0
    return np.column_stack([deltas, pen])


def synth_sequences(kind: str, num_classes: int, per_class: int, seed: int) -> SequenceBatch:
    """Generate ``per_class`` labelled sequences for each of ``num_classes`` classes.

    Class templates depend only on ``seed``, so train and test sets drawn
    from different seeds would not share classes; use :func:`synth_split`.
    """
    return synth_split(kind, num_classes, per_class, 0, seed)[0]


def synth_split(kind: str, num_classes: int, train_per_class: int, test_per_class: int,
                seed: int) -> tuple[SequenceBatch, SequenceBatch]:
    if num_classes < 2:
        raise ValueError("need at least two classes")
    tpl_rng = np.random.default_rng([seed, 0])
    sample_rng = np.random.default_rng([seed, 1])
    if kind in ("spectrogram", "spectrogram-like", "featureseq"):
        templates = _spectrogram_templates(num_classes, tpl_rng)

        def draw(k, n):
            shift = sample_rng.integers(-2, 3, size=n)
            gain = sample_rng.uniform(0.85, 1.15, size=(n, 1, 1))
            base = np.stack([np.roll(templates[k], s, axis=0) for s in shift]) if n else np.zeros((0, SPEC_STEPS, SPEC_BANDS))
            return base * gain + sample_rng.normal(0.0, 0.3, size=(n, SPEC_STEPS, SPEC_BANDS))

        def build(per):
            xs = [draw(k, per) for k in range(num_classes)]
            y = np.repeat(np.arange(num_classes), per)
            x = np.concatenate(xs) if per else np.zeros((0, SPEC_STEPS, SPEC_BANDS))
            return SequenceBatch.from_fixed(x, y)

        train = build(train_per_class)
        test = build(test_per_class)
        return train, test
    if kind in ("stroke", "stroke-like", "strokes"):
        templates = [_stroke_template(tpl_rng) for _ in range(num_classes)]

        def build(per):
            seqs, y = [], []
            for k in range(num_classes):
                for _ in range(per):
                    seqs.append(_draw_stroke(templates[k], sample_rng))
                    y.append(k)
            if not seqs:
                return SequenceBatch.empty(STROKE_MIN_LEN, 3)
            return SequenceBatch.from_sequences(seqs, y)

        train = build(train_per_class)
        test = build(test_per_class)
        return train, test
    raise ValueError(f"unknown synthetic kind {kind!r}")


# -- nearest-template oracle ---------------------------------------------------

def _stroke_signature(seq: np.ndarray) -> np.ndarray:
    pts = np.cumsum(seq[:, :2], axis=0)
    src = np.linspace(0.0, 1.0, len(pts))
    dst = np.linspace(0.0, 1.0, _RESAMPLE_POINTS)
    return np.concatenate([np.interp(dst, src, pts[:, 0]), np.interp(dst, src, pts[:, 1])])


def _signatures(data: SequenceBatch) -> np.ndarray:
    if data.is_fixed_length and data.feat_dim != 3:
        return data.x.reshape(len(data), -1)
    return np.stack([_stroke_signature(s) for s in data.sequences()])


def template_classifier_accuracy(train: SequenceBatch, test: SequenceBatch) -> float:
    """Accuracy of nearest class-mean classification (means estimated on ``train``)."""
    ftr, fte = _signatures(train), _signatures(test)
    classes = np.unique(train.targets)
    means = np.stack([ftr[train.targets == c].mean(axis=0) for c in classes])
    d = ((fte[:, None, :] - means[None]) ** 2).sum(axis=-1)
    pred = classes[d.argmin(axis=1)]
    return float((pred == test.targets).mean())

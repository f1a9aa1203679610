import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqcl.errors import ConfigurationError, FormatError, ProtocolError
from seqcl.sequences import SequenceBatch
from seqcl.streams import (
    Dataset,
    apply_fixed_permutation,
    build_class_incremental,
    build_domain_incremental,
    check_disjoint_steps,
    check_no_leakage,
    holdout_split,
    load_manifest,
    read_feature_sequences,
    read_idx,
    read_strokes,
    rebuild,
    save_manifest,
    synth_sequences,
    synth_split,
    template_classifier_accuracy,
    write_feature_sequences,
    write_idx,
    write_strokes,
)
from seqcl.streams.scenarios import fixed_permutation


def toy_dataset(num_classes=10, per_class=3, T=4, d=2, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(num_classes), per_class)
    tr = SequenceBatch.from_fixed(rng.normal(size=(len(y), T, d)), y)
    te = SequenceBatch.from_fixed(rng.normal(size=(len(y), T, d)), y)
    return Dataset("toy", tr, te)


# -- IDX -----------------------------------------------------------------------

def _idx_bytes(magic, dims, payload: bytes):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload


def test_idx_one_image_scaled_by_255(tmp_path):
    (tmp_path / "i").write_bytes(_idx_bytes(2051, (1, 2, 2), bytes([0, 255, 128, 64])))
    (tmp_path / "l").write_bytes(_idx_bytes(2049, (1,), bytes([7])))
    data = read_idx(tmp_path / "i", tmp_path / "l")
    assert np.allclose(data.images, [[[0.0, 1.0], [0.5019607843137255, 0.25098039215686274]]], atol=1e-15)
    assert data.labels.tolist() == [7]


def test_idx_count_mismatch_and_bad_magic(tmp_path):
    (tmp_path / "i").write_bytes(_idx_bytes(2051, (2, 1, 1), bytes([1, 2])))
    (tmp_path / "l").write_bytes(_idx_bytes(2049, (1,), bytes([0])))
    with pytest.raises(FormatError, match="count"):
        read_idx(tmp_path / "i", tmp_path / "l")
    with pytest.raises(FormatError, match="magic"):
        read_idx(tmp_path / "l", tmp_path / "l")
    (tmp_path / "t").write_bytes(_idx_bytes(2051, (2, 2, 2), bytes([1, 2, 3])))
    with pytest.raises(FormatError, match="byte"):
        read_idx(tmp_path / "t", tmp_path / "l")


def test_idx_empty_payload(tmp_path):
    (tmp_path / "i").write_bytes(_idx_bytes(2051, (0, 28, 28), b""))
    (tmp_path / "l").write_bytes(_idx_bytes(2049, (0,), b""))
    assert len(read_idx(tmp_path / "i", tmp_path / "l")) == 0


def test_idx_write_read_round_trip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(3, 28, 28), dtype=np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", imgs, np.array([1, 2, 3]))
    data = read_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(np.rint(data.images * 255).astype(np.uint8), imgs)


# -- strokes and feature sequences ---------------------------------------------

def test_stroke_record(tmp_path):
    p = tmp_path / "s.strokes"
    p.write_text("4\t3 0 0;−1 2 1\n", encoding="utf-8")
    data = read_strokes(p)
    assert data.lengths.tolist() == [2] and data.targets.tolist() == [4]
    assert np.array_equal(data.sequences()[0], [[3, 0, 0], [-1, 2, 1]])


def test_stroke_errors(tmp_path):
    p = tmp_path / "s.strokes"
    p.write_text("0\t1 1 2\n")
    with pytest.raises(FormatError, match="pen"):
        read_strokes(p)
    p.write_text("0\t\n")
    with pytest.raises(FormatError, match="empty"):
        read_strokes(p)


def test_stroke_round_trip_preserves_lengths(tmp_path):
    data = synth_sequences("strokes", 3, 4, seed=1)
    write_strokes(tmp_path / "a", data)
    back = read_strokes(tmp_path / "a")
    assert len(back) == len(data) and np.array_equal(back.lengths, data.lengths)
    for a, b in zip(back.sequences(), data.sequences()):
        assert np.array_equal(a, b)


def test_feature_sequence_round_trip(tmp_path):
    data = synth_sequences("featureseq", 2, 2, seed=0)
    write_feature_sequences(tmp_path / "f", data)
    back = read_feature_sequences(tmp_path / "f")
    assert np.array_equal(back.x, data.x) and np.array_equal(back.targets, data.targets)


# -- synthetic data ---------------------------------------------------------------

def test_synthetic_shapes_and_determinism():
    spec = synth_sequences("spectrogram-like", 2, 3, seed=4)
    assert spec.x.shape == (6, 101, 40)
    strokes = synth_sequences("stroke-like", 2, 50, seed=4)
    assert strokes.feat_dim == 3 and 8 <= strokes.lengths.min() and strokes.lengths.max() <= 211
    assert strokes.lengths.min() < strokes.lengths.max()
    assert len(synth_sequences("featureseq", 3, 0, seed=0)) == 0
    a, b = synth_sequences("strokes", 3, 5, seed=9), synth_sequences("strokes", 3, 5, seed=9)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.lengths, b.lengths)


@pytest.mark.parametrize("kind", ["featureseq", "strokes"])
def test_template_oracle_separates_synthetic_classes(kind):
    train, test = synth_split(kind, 16, 200, 50, seed=0)
    assert template_classifier_accuracy(train, test) >= 0.99


# -- scenarios -------------------------------------------------------------------

def test_split_mnist_style_identity_order():
    sc = build_class_incremental(toy_dataset(), 2, 5)
    assert [s.classes_introduced for s in sc.steps] == [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
    for s in sc.steps:
        assert set(s.train.targets) == set(s.classes_introduced)
        assert set(s.test.targets) == set(s.classes_introduced)
        assert s.task_label == 0
    check_disjoint_steps(sc)


def test_multi_task_labels_and_local_targets():
    sc = build_class_incremental(toy_dataset(), 2, 5, multi_task=True)
    assert [s.task_label for s in sc.steps] == list(range(5))
    assert all(set(s.train.targets) == {0, 1} for s in sc.steps)


def test_single_class_single_step_slice():
    ds = toy_dataset()
    sc = build_class_incremental(ds, 1, 1)
    assert np.array_equal(sc.steps[0].train.x, ds.train.x[ds.train.targets == 0])


def test_insufficient_classes():
    with pytest.raises(ConfigurationError):
        build_class_incremental(toy_dataset(), 3, 4)


def test_holdout_split_16_classes():
    sc = build_class_incremental(toy_dataset(16), 2, 8, seed=3)
    val, assess = holdout_split(sc, 3)
    assert len(val) == 3 and len(assess) == 5
    assert val.num_classes == 6 and assess.num_classes == 10
    check_no_leakage(val, assess)
    sc26 = build_class_incremental(toy_dataset(26), 2, 13, seed=3)
    assert len(holdout_split(sc26, 3)[1]) == 10


def test_holdout_same_stream_and_zero_validation():
    sc = build_class_incremental(toy_dataset(), 2, 5)
    val, assess = holdout_split(sc, 3, same_stream=True)
    assert [s.classes_introduced for s in val.steps] == [s.classes_introduced for s in assess.steps]
    check_no_leakage(val, assess)
    val, assess = holdout_split(sc, 0)
    assert len(val) == 0 and len(assess) == 5


def test_leakage_detected():
    sc = build_class_incremental(toy_dataset(), 2, 5)
    val, _ = holdout_split(sc, 2)
    with pytest.raises(ProtocolError):
        check_no_leakage(val, val)


def test_domain_incremental():
    ds = toy_dataset()
    one = build_domain_incremental(ds, 1, seed=0)
    assert np.array_equal(one.steps[0].train.x, ds.train.x)
    a, b = build_domain_incremental(ds, 3, seed=5), build_domain_incremental(ds, 3, seed=5)
    assert a.manifest == b.manifest
    perm = np.asarray(a.manifest["permutations"][2])
    flat = a.steps[2].train.x.reshape(len(ds.train), -1)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    assert np.array_equal(flat[:, inv], ds.train.x.reshape(len(ds.train), -1))
    assert all(s.classes_introduced == list(range(10)) for s in a.steps)


def test_fixed_permutation():
    sc = build_class_incremental(toy_dataset(), 2, 5)
    same = apply_fixed_permutation(sc, 0)
    assert all(np.array_equal(a.train.x, b.train.x) for a, b in zip(sc.steps, same.steps))
    once = apply_fixed_permutation(sc, 4)
    perm = fixed_permutation(8, 4)
    for a, b in zip(sc.steps, once.steps):
        assert np.array_equal(b.test.x.reshape(len(b.test), -1), a.test.x.reshape(len(a.test), -1)[:, perm])
    twice = apply_fixed_permutation(once, 4)
    sq = perm[perm]
    for a, b in zip(sc.steps, twice.steps):
        assert np.array_equal(b.train.x.reshape(len(b.train), -1), a.train.x.reshape(len(a.train), -1)[:, sq])


def test_fixed_permutation_rejects_ragged_inputs():
    data = synth_sequences("strokes", 2, 3, seed=0)
    sc = build_class_incremental(Dataset("s", data, data), 1, 2)
    with pytest.raises(ConfigurationError):
        apply_fixed_permutation(sc, 1)


def test_manifest_rebuild_is_byte_identical(tmp_path):
    ds = toy_dataset()
    sc = apply_fixed_permutation(build_class_incremental(ds, 2, 5, seed=11), 2)
    save_manifest(tmp_path / "m.json", sc.manifest)
    again = rebuild(load_manifest(tmp_path / "m.json"), ds)
    for a, b in zip(sc.steps, again.steps):
        assert a.train.x.tobytes() == b.train.x.tobytes() and a.test.x.tobytes() == b.test.x.tobytes()
        assert a.classes_introduced == b.classes_introduced
    with pytest.raises(ConfigurationError):
        rebuild(sc.manifest, toy_dataset(seed=1))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10**6), st.integers(0, 3))
def test_generated_scenarios_never_leak(cps, seed, n_val):
    n_classes = 16
    steps = n_classes // cps
    sc = build_class_incremental(toy_dataset(n_classes, per_class=1), cps, steps, seed=seed)
    check_disjoint_steps(sc)
    if n_val < steps:
        val, assess = holdout_split(sc, n_val)
        check_no_leakage(val, assess)
        assert not val.classes() & assess.classes()

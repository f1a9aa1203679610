"""MNIST ingestion for the split and permuted benchmarks.

Training code only ever reads IDX files.  When the full MNIST files are not
available locally, :func:`export_bundled_subset` writes the 5,000-image
MNIST subset shipped inside ``mlxtend`` (500 per class) as IDX files.
"""
from __future__ import annotations

import gzip
import os
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError
from ..models import chunk_images
from ..sequences import SequenceBatch
from .formats import LabeledImages, read_idx, write_idx
from .scenarios import Dataset

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
DATA_ROOT_ENV = "SEQCL_DATA_ROOT"


def default_data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, Path.home() / ".cache" / "seqcl"))


def _bundled_csv() -> Path:
    try:
        import importlib.resources as resources

        path = resources.files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"
    except ModuleNotFoundError:
        raise ConfigurationError(
            "no MNIST IDX files found and mlxtend (which bundles a 5k MNIST subset) is not installed"
        ) from None
    return Path(str(path))


def export_bundled_subset(out_dir, test_per_class: int = 100, seed: int = 0) -> Path:
    """Write the bundled 5k MNIST subset as IDX train/test files under ``out_dir/mnist``.

    ``test_per_class`` images of each digit go to the test files, the rest to
    the training files.  Returns the directory.
    """
    out = Path(out_dir) / "mnist"
    out.mkdir(parents=True, exist_ok=True)
    with gzip.open(_bundled_csv(), "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1].astype(np.uint8), table[:, -1]
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        test_idx.extend(rng.choice(idx, size=test_per_class, replace=False).tolist())
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[test_idx] = True
    imgs = pixels.reshape(-1, 28, 28)
    write_idx(out / TRAIN_FILES[0], out / TRAIN_FILES[1], imgs[~test_mask], labels[~test_mask])
    write_idx(out / TEST_FILES[0], out / TEST_FILES[1], imgs[test_mask], labels[test_mask])
    return out


def find_mnist(data_root=None, create: bool = True) -> Path:
    root = Path(data_root) if data_root is not None else default_data_root()
    for cand in (root / "mnist", root):
        if all((cand / f).exists() for f in TRAIN_FILES + TEST_FILES):
            return cand
    if not create:
        raise ConfigurationError(f"MNIST IDX files not found under {root}")
    return export_bundled_subset(root)


def load_mnist(data_root=None) -> tuple[LabeledImages, LabeledImages]:
    d = find_mnist(data_root)
    return read_idx(d / TRAIN_FILES[0], d / TRAIN_FILES[1]), read_idx(d / TEST_FILES[0], d / TEST_FILES[1])


def per_class_subsample(labels: np.ndarray, per_class: int | None, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``per_class`` random examples of each class, in original order."""
    if per_class is None:
        return np.arange(len(labels))
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per_class:
            raise ConfigurationError(f"class {c} has {len(idx)} examples, {per_class} requested")
        keep.append(rng.choice(idx, size=per_class, replace=False))
    return np.sort(np.concatenate(keep))


def mnist_dataset(chunk: int = 28, data_root=None, train_per_class: int | None = None,
                  test_per_class: int | None = None, subsample_seed: int = 0) -> Dataset:
    """Pixel-sequence MNIST: ``784 / chunk`` timesteps of ``chunk`` pixels each."""
    train, test = load_mnist(data_root)
    rng = np.random.default_rng(subsample_seed)
    tr = per_class_subsample(train.labels, train_per_class, rng)
    te = per_class_subsample(test.labels, test_per_class, rng)
    return Dataset(
        f"mnist-chunk{chunk}",
        SequenceBatch.from_fixed(chunk_images(train.images[tr], chunk), train.labels[tr]),
        SequenceBatch.from_fixed(chunk_images(test.images[te], chunk), test.labels[te]),
    )

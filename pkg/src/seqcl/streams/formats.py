"""Readers and writers for the on-disk data formats.

* IDX (MNIST distribution format, big endian).
* Stroke files: ``label<TAB>dx dy pen;dx dy pen;...`` one drawing per line.
* Feature-sequence files: header ``n_seq seq_len feat_dim``, then for each
  sequence a ``#label`` line followed by ``seq_len`` lines of floats, with a
  blank line between sequences.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..sequences import SequenceBatch

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_DTYPES.items()}


def read_idx_file(path) -> tuple[int, np.ndarray]:
    """Parse one IDX file; returns ``(magic, array)`` with the stored dtype."""
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated header at byte {len(buf)}")
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    magic = struct.unpack(">I", buf[:4])[0]
    if zero != 0 or code not in _IDX_DTYPES or ndim == 0:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte 0")
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise FormatError(f"{path}: truncated dimension header at byte {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    dtype = _IDX_DTYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(buf) - header_end < need:
        raise FormatError(
            f"{path}: payload truncated at byte {len(buf)}, expected {header_end + need} bytes"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=header_end).reshape(dims)
    return magic, arr.astype(dtype.newbyteorder("="))


def write_idx_file(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"dtype {arr.dtype} has no IDX code")
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(_IDX_DTYPES[code]).tobytes())


@dataclass
class LabeledImages:
    images: np.ndarray  # n x rows x cols, float64 in [0, 1]
    labels: np.ndarray  # n, int64

    def __len__(self) -> int:
        return len(self.labels)


def read_idx(images_path, labels_path) -> LabeledImages:
    """Read an IDX image/label pair.  Pixels are divided by 255 and nothing else."""
    magic, images = read_idx_file(images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: expected image magic {IDX_IMAGES_MAGIC}, found {magic} at byte 0")
    lmagic, labels = read_idx_file(labels_path)
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: expected label magic {IDX_LABELS_MAGIC}, found {lmagic} at byte 0")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]} (byte 4)"
        )
    return LabeledImages(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    write_idx_file(images_path, np.asarray(images_u8, dtype=np.uint8))
    write_idx_file(labels_path, np.asarray(labels, dtype=np.uint8))


# -- stroke files -------------------------------------------------------------

def _num(tok: str, where: str) -> float:
    try:
        return float(tok.replace("−", "-"))
    except ValueError:
        raise FormatError(f"{where}: not a number: {tok!r}") from None


def parse_stroke_record(body: str, where: str = "record") -> np.ndarray:
    points = []
    for k, part in enumerate(body.strip().split(";")):
        if not part.strip():
            continue
        toks = part.split()
        if len(toks) != 3:
            raise FormatError(f"{where}, point {k}: expected 'dx dy pen', got {part!r}")
        dx, dy, pen = (_num(t, where) for t in toks)
        if pen not in (0.0, 1.0):
            raise FormatError(f"{where}, point {k}: pen bit must be 0 or 1, got {toks[2]!r}")
        points.append((dx, dy, pen))
    if not points:
        raise FormatError(f"{where}: empty sequence")
    return np.array(points, dtype=np.float64)


def read_strokes(path) -> SequenceBatch:
    seqs, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            label, sep, body = line.rstrip("\n").partition("\t")
            where = f"{path}:{lineno}"
            if not sep:
                raise FormatError(f"{where}: missing TAB after label")
            try:
                labels.append(int(label))
            except ValueError:
                raise FormatError(f"{where}: bad label {label!r}") from None
            seqs.append(parse_stroke_record(body, where))
    return SequenceBatch.from_sequences(seqs, labels, feat_dim=3)


def _fmt_num(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


def write_strokes(path, data: SequenceBatch) -> None:
    lines = []
    for seq, label in zip(data.sequences(), data.targets):
        body = ";".join(" ".join(_fmt_num(v) for v in row) for row in seq)
        lines.append(f"{int(label)}\t{body}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def convert_sketchrnn_npz(npz_path, out_path, label: int, split: str = "train", limit: int | None = None) -> int:
    """Convert one class file of the public sketch-rnn ``.npz`` release to a stroke file.

    Those files hold object arrays of ``(n_points, 3)`` int16 stroke-3 rows
    (dx, dy, pen-lifted) under ``train``/``valid``/``test``.  Returns the
    number of drawings written (appended if ``out_path`` exists).
    """
    with np.load(npz_path, allow_pickle=True, encoding="latin1") as z:
        drawings = list(z[split])
    if limit is not None:
        drawings = drawings[:limit]
    with open(out_path, "a", encoding="utf-8") as fh:
        for d in drawings:
            d = np.asarray(d)
            fh.write(f"{int(label)}\t" + ";".join(f"{int(a)} {int(b)} {int(c)}" for a, b, c in d) + "\n")
    return len(drawings)


# -- feature-sequence files ---------------------------------------------------

def write_feature_sequences(path, data: SequenceBatch) -> None:
    if not data.is_fixed_length:
        raise FormatError("feature-sequence files hold fixed-length sequences only")
    n, T, d = data.x.shape
    out = [f"{n} {T} {d}"]
    for i in range(n):
        if i:
            out.append("")
        out.append(f"#{int(data.targets[i])}")
        out.extend(" ".join(map(repr, row)) for row in data.x[i].tolist())
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_feature_sequences(path) -> SequenceBatch:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        n, T, d = (int(t) for t in lines[0].split())
    except ValueError:
        raise FormatError(f"{path}:1: header must be 'n_seq seq_len feat_dim'") from None
    x = np.zeros((n, T, d))
    labels = np.zeros(n, dtype=np.int64)
    pos = 1
    for i in range(n):
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines) or not lines[pos].startswith("#"):
            raise FormatError(f"{path}:{pos + 1}: expected '#label' for sequence {i}")
        labels[i] = int(lines[pos][1:])
        pos += 1
        for t in range(T):
            if pos >= len(lines):
                raise FormatError(f"{path}: truncated in sequence {i}")
            row = lines[pos].split()
            if len(row) != d:
                raise FormatError(f"{path}:{pos + 1}: expected {d} values, got {len(row)}")
            x[i, t] = [float(v) for v in row]
            pos += 1
    return SequenceBatch.from_fixed(x, labels)

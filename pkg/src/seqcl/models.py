"""MLP and LSTM sequence classifiers with single- or multi-head outputs."""
from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ProtocolError
from .sequences import SequenceBatch


class UnsupportedInputError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "lstm"  # "mlp" | "lstm"
    input_size: int = 28
    hidden_size: int = 128
    num_layers: int = 1
    head_mode: str = "single"  # "single" | "multi"
    num_classes_total: int = 10
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.kind not in ("mlp", "lstm"):
            raise ValueError(f"model kind must be 'mlp' or 'lstm', got {self.kind!r}")
        if self.head_mode not in ("single", "multi"):
            raise ValueError(f"head_mode must be 'single' or 'multi', got {self.head_mode!r}")
        for field in ("input_size", "hidden_size", "num_layers", "num_classes_total"):
            if int(getattr(self, field)) < 1:
                raise ValueError(f"{field} must be a positive integer")


def lstm_param_count(input_size: int, hidden_size: int) -> int:
    return 4 * hidden_size * (input_size + hidden_size) + 4 * hidden_size


class Classifier:
    """Sequence classifier.

    LSTM models unroll every sequence up to its own length and classify from
    the hidden state at the last real timestep.  MLP models flatten a
    fixed-length sequence into one vector.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng([self.seed, 0])
        self.body: list[tuple[str, Tensor]] = []
        self.heads: dict[int, tuple[Tensor, Tensor]] = {}
        c = config
        if c.kind == "lstm":
            fan_in = c.input_size
            bound = 1.0 / math.sqrt(c.hidden_size)
            for layer in range(c.num_layers):
                h = c.hidden_size
                w_ih = rng.uniform(-bound, bound, size=(fan_in, 4 * h))
                w_hh = rng.uniform(-bound, bound, size=(h, 4 * h))
                bias = rng.uniform(-bound, bound, size=4 * h)
                bias[h : 2 * h] = c.forget_bias
                self.body += [
                    (f"lstm.{layer}.w_ih", Tensor(w_ih, True)),
                    (f"lstm.{layer}.w_hh", Tensor(w_hh, True)),
                    (f"lstm.{layer}.bias", Tensor(bias, True)),
                ]
                fan_in = h
        else:
            fan_in = c.input_size
            for layer in range(c.num_layers):
                w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, c.hidden_size))
                self.body += [
                    (f"mlp.{layer}.weight", Tensor(w, True)),
                    (f"mlp.{layer}.bias", Tensor(np.zeros(c.hidden_size), True)),
                ]
                fan_in = c.hidden_size
        if c.head_mode == "single":
            self.add_head(0, c.num_classes_total)

    # -- parameters -------------------------------------------------------
    def add_head(self, task_label: int, num_outputs: int) -> None:
        task_label = int(task_label)
        if task_label in self.heads:
            return
        if self.config.head_mode == "single" and self.heads:
            raise ProtocolError("single-head models have exactly one head")
        rng = np.random.default_rng([self.seed, 1, task_label])
        h = self.config.hidden_size
        bound = 1.0 / math.sqrt(h)
        self.heads[task_label] = (
            Tensor(rng.uniform(-bound, bound, size=(h, num_outputs)), True),
            Tensor(np.zeros(num_outputs), True),
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.body)
        for t in sorted(self.heads):
            w, b = self.heads[t]
            out += [(f"head.{t}.weight", w), (f"head.{t}.bias", b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def clone(self) -> Classifier:
        return copy.deepcopy(self)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    # -- forward ----------------------------------------------------------
    def features(self, batch: SequenceBatch) -> Tensor:
        c = self.config
        if batch.feat_dim != c.input_size and c.kind == "lstm":
            raise ad.DimensionError(f"input feature size {batch.feat_dim} != configured {c.input_size}")
        if c.kind == "mlp":
            if not batch.is_fixed_length:
                raise UnsupportedInputError("MLP models need fixed-length sequences")
            flat = batch.x.reshape(len(batch), -1)
            if flat.shape[1] != c.input_size:
                raise ad.DimensionError(f"flattened input size {flat.shape[1]} != configured {c.input_size}")
            out = Tensor(flat)
            params = dict(self.body)
            for layer in range(c.num_layers):
                out = ad.relu(ad.matmul(out, params[f"mlp.{layer}.weight"]) + params[f"mlp.{layer}.bias"])
            return out
        return self._lstm_features(batch)

    def _lstm_features(self, batch: SequenceBatch) -> Tensor:
        params = dict(self.body)
        out = Tensor(batch.x)
        for layer in range(self.config.num_layers):
            # finished sequences carry their last real state forward
            out = ad.lstm_layer(out, batch.lengths, params[f"lstm.{layer}.w_ih"], params[f"lstm.{layer}.w_hh"],
                                params[f"lstm.{layer}.bias"])
        return out[:, -1, :]

    def forward(self, batch: SequenceBatch, task_label: int | None = None) -> Tensor:
        if self.config.head_mode == "multi":
            if task_label is None:
                raise ProtocolError("multi-head models need a task label")
            if int(task_label) not in self.heads:
                raise ProtocolError(f"no head for task label {task_label}")
            w, b = self.heads[int(task_label)]
        else:
            if task_label is not None:
                raise ProtocolError("single-head models do not take task labels")
            w, b = self.heads[0]
        return ad.matmul(self.features(batch), w) + b

    __call__ = forward

    def predict(self, batch: SequenceBatch, task_label: int | None = None, mask=None) -> np.ndarray:
        with ad.no_grad():
            logits = self.forward(batch, task_label).data
        if mask is not None:
            logits = np.where(np.asarray(mask, dtype=bool), logits, -np.inf)
        return logits.argmax(axis=1)


def classify_sequence(model: Classifier, batch: SequenceBatch, task_label: int | None = None) -> Tensor:
    return model.forward(batch, task_label)


# -- pixel sequences --------------------------------------------------------

def chunk_pixels(image: np.ndarray, chunk: int) -> np.ndarray:
    """Cut a 28x28 image, read row-major, into ``784 / chunk`` timesteps of ``chunk`` pixels."""
    image = np.asarray(image, dtype=np.float64)
    if image.size != 784:
        raise ad.DimensionError(f"expected a 28x28 image, got shape {image.shape}")
    if chunk < 1 or 784 % chunk:
        raise ValueError(f"chunk must divide 784, got {chunk}")
    return image.reshape(784 // chunk, chunk)


def chunk_images(images: np.ndarray, chunk: int) -> np.ndarray:
    """Vectorised :func:`chunk_pixels` over ``n`` images (``n x 784`` or ``n x 28 x 28``)."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if images.size != n * 784:
        raise ad.DimensionError(f"expected n 28x28 images, got shape {images.shape}")
    if chunk < 1 or 784 % chunk:
        raise ValueError(f"chunk must divide 784, got {chunk}")
    return images.reshape(n, 784 // chunk, chunk)


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"SQCL"
CHECKPOINT_VERSION = 1


def write_container(path, record: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Write a header, a JSON record and named little-endian float64 tensors."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    blob = json.dumps(record, sort_keys=True).encode("utf-8")
    chunks += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        chunks += [struct.pack("<I", d) for d in arr.shape]
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_container(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated checkpoint at byte {pos}")
        piece = buf[pos : pos + n]
        pos += n
        return piece

    def u32():
        return struct.unpack("<I", take(4))[0]

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic at byte 0")
    version = u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    record = json.loads(take(u32()).decode("utf-8"))
    tensors = []
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        tensors.append((name, arr))
    return record, tensors


def save_checkpoint(path, model: Classifier, extra: dict | None = None,
                    extra_tensors: list[tuple[str, np.ndarray]] | None = None) -> None:
    record = {
        "config": asdict(model.config),
        "seed": model.seed,
        "heads": {str(t): int(w.shape[1]) for t, (w, _) in model.heads.items()},
        "extra": extra or {},
    }
    tensors = [(name, p.data) for name, p in model.named_parameters()]
    write_container(path, record, tensors + list(extra_tensors or []))


def load_checkpoint(path) -> tuple[Classifier, dict, dict[str, np.ndarray]]:
    """Return the model, the extra record and any non-model tensors."""
    record, tensors = read_container(path)
    model = Classifier(ModelConfig(**record["config"]), seed=record["seed"])
    for t, n in record["heads"].items():
        model.add_head(int(t), n)
    params = dict(model.named_parameters())
    rest = {}
    for name, arr in tensors:
        if name in params:
            if params[name].shape != arr.shape:
                raise CheckpointFormatError(f"shape mismatch for {name}: {arr.shape} vs {params[name].shape}")
            params[name].data = arr.copy()
        else:
            rest[name] = arr
    return model, record.get("extra", {}), rest

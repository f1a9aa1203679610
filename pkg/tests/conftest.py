import numpy as np
import pytest

from seqcl import autodiff as ad
from seqcl.autodiff import Tensor
from seqcl.sequences import SequenceBatch
from seqcl.streams import Dataset, build_class_incremental


def blob_dataset(num_classes=4, per_class=20, T=4, d=3, noise=0.3, seed=0, name="blobs"):
    """Fixed-length sequences scattered around one template per class."""
    rng = np.random.default_rng(seed)
    tpl = rng.normal(size=(num_classes, T, d))

    def draw(n):
        y = np.repeat(np.arange(num_classes), n)
        return SequenceBatch.from_fixed(tpl[y] + noise * rng.normal(size=(len(y), T, d)), y)

    return Dataset(name, draw(per_class), draw(max(1, per_class // 2)))


@pytest.fixture
def blob_stream():
    return build_class_incremental(blob_dataset(), 2, 2)


class TinyModel:
    """Duck-typed single-parameter-matrix model: logits = x[:, 0] @ w @ proj."""

    def __init__(self, w, proj=None):
        self.w = Tensor(np.atleast_2d(np.asarray(w, dtype=np.float64)), requires_grad=True)
        self.proj = None if proj is None else Tensor(np.asarray(proj, dtype=np.float64))
        self.heads = {}

    def named_parameters(self):
        return [("w", self.w)]

    def parameters(self):
        return [self.w]

    def zero_grad(self):
        self.w.zero_grad()

    def forward(self, batch, task=None):
        out = ad.matmul(Tensor(batch.x[:, 0, :]), self.w)
        return out if self.proj is None else ad.matmul(out, self.proj)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)

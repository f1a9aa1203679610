"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op records its operands and a vector-Jacobian closure on the output
tensor; ``Tensor.backward`` walks the recorded graph in reverse topological
order.  The graph is rebuilt on every forward pass, which keeps variable
sequence lengths trivial to handle.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=DTYPE).reshape(self.shape).copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS: unrolled recurrences are far deeper than the recursion limit
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ops ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    def backward(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _make(a.data**p, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def backward(g):
        _accum(a, g * pos)

    return _make(a.data * pos, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def backward(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - t * t))

    return _make(t, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``.  ``cond`` is constant."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    data = np.where(cond, a.data, b.data)

    def backward(g):
        _accum(a, _unbroadcast(np.where(cond, g, 0.0), a.shape))
        _accum(b, _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _make(data, (a, b), backward)


# -- shape ops ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, (a,), backward)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def index(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)

    return _make(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(data, tensors, backward)


def tsum(a: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


# -- losses ------------------------------------------------------------------

def _masked(logits: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return logits
    return np.where(np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape), logits, -np.inf)


def log_softmax_np(logits: np.ndarray, mask=None) -> np.ndarray:
    z = _masked(logits, mask)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def softmax_np(logits: np.ndarray, mask=None) -> np.ndarray:
    return np.exp(log_softmax_np(logits, mask))


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits).

    ``mask`` (bool, broadcastable to the logits) drops output units from the
    softmax; dropped units receive zero gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects b x c logits, got {logits.shape}")
    b, c = logits.shape
    if b < 1 or targets.shape != (b,):
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"target out of range [0, {c}): {targets.min()}..{targets.max()}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits in cross_entropy (diverged training?)")
    if mask is not None and not np.all(np.broadcast_to(np.asarray(mask, dtype=bool), (b, c))[np.arange(b), targets]):
        raise IndexError("a target class is masked out of the softmax")
    logp = log_softmax_np(logits.data, mask)
    picked = logp[np.arange(b), targets]
    loss = -picked.mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), targets] -= 1.0
        _accum(logits, p * (g / b))

    return _make(np.asarray(loss), (logits,), backward)


def kl_divergence(p_logits, q_logits: Tensor, temperature: float = 1.0, mask=None) -> Tensor:
    """Batch mean of KL(softmax(p/T) || softmax(q/T)).

    ``p_logits`` is treated as a constant; gradient flows into ``q_logits`` only.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    p = p_logits.data if isinstance(p_logits, Tensor) else np.asarray(p_logits, dtype=DTYPE)
    if p.shape != q_logits.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {p.shape} vs {q_logits.shape}")
    b = p.shape[0]
    logp = log_softmax_np(p / temperature, mask)
    logq = log_softmax_np(q_logits.data / temperature, mask)
    pp = np.exp(logp)
    live = pp > 0  # masked units have logp = -inf and contribute nothing
    terms = np.zeros_like(pp)
    terms[live] = pp[live] * (logp[live] - logq[live])
    kl = terms.sum() / b

    def backward(g):
        qq = np.exp(logq)
        _accum(q_logits, (qq - pp) * (g / (b * temperature)))

    return _make(np.asarray(max(kl, 0.0)), (q_logits,), backward)


# -- recurrent cell ----------------------------------------------------------

def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor):
    """One LSTM step as a single graph node.  Gate order: input, forget, cell, output.

    Returns ``(h, c)``; both are slices of one fused ``b x 2h`` node.
    """
    if x.data.ndim != 2 or h_prev.data.ndim != 2:
        raise DimensionError(f"lstm_step expects 2-d inputs, got {x.shape} and {h_prev.shape}")
    hs = h_prev.shape[1]
    if (
        w_ih.shape != (x.shape[1], 4 * hs)
        or w_hh.shape != (hs, 4 * hs)
        or bias.shape != (4 * hs,)
        or c_prev.shape != h_prev.shape
        or x.shape[0] != h_prev.shape[0]
    ):
        raise DimensionError(
            f"lstm_step shape mismatch: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, "
            f"w_ih {w_ih.shape}, w_hh {w_hh.shape}, bias {bias.shape}"
        )
    a = x.data @ w_ih.data + h_prev.data @ w_hh.data + bias.data
    gi = _sigmoid(a[:, :hs])
    gf = _sigmoid(a[:, hs : 2 * hs])
    gg = np.tanh(a[:, 2 * hs : 3 * hs])
    go = _sigmoid(a[:, 3 * hs :])
    c = gf * c_prev.data + gi * gg
    tc = np.tanh(c)
    h = go * tc

    def backward(g):
        dh, dc = g[:, :hs], g[:, hs:]
        dc = dc + dh * go * (1.0 - tc * tc)
        da = np.concatenate(
            [
                dc * gg * gi * (1.0 - gi),
                dc * c_prev.data * gf * (1.0 - gf),
                dc * gi * (1.0 - gg * gg),
                dh * tc * go * (1.0 - go),
            ],
            axis=1,
        )
        if x.requires_grad:
            _accum(x, da @ w_ih.data.T)
        if h_prev.requires_grad:
            _accum(h_prev, da @ w_hh.data.T)
        _accum(c_prev, dc * gf)
        if w_ih.requires_grad:
            _accum(w_ih, x.data.T @ da)
        if w_hh.requires_grad:
            _accum(w_hh, h_prev.data.T @ da)
        _accum(bias, da.sum(axis=0))

    hc = _make(np.concatenate([h, c], axis=1), (x, h_prev, c_prev, w_ih, w_hh, bias), backward)
    return hc[:, :hs], hc[:, hs:]


def lstm_layer(x, lengths, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Tensor:
    """A whole LSTM layer over ``n x T x d`` inputs as one graph node, with hand-written BPTT.

    Returns the ``n x T x h`` hidden states.  Past its length a sequence
    carries its last real ``(h, c)`` forward unchanged.  Matches repeated
    :func:`lstm_step` calls exactly.
    """
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"lstm_layer expects n x T x d inputs, got {x.shape}")
    n, T, d = x.shape
    hs = w_hh.shape[0]
    if w_ih.shape != (d, 4 * hs) or w_hh.shape != (hs, 4 * hs) or bias.shape != (4 * hs,):
        raise DimensionError(
            f"lstm_layer shape mismatch: x {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}, bias {bias.shape}"
        )
    lengths = np.full(n, T) if lengths is None else np.asarray(lengths)
    variable = bool(np.any(lengths < T))
    # time-major buffers keep every per-step slice contiguous
    active = (np.arange(T)[:, None] < lengths[None, :]).astype(DTYPE)[:, :, None]  # T x n x 1
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2))
    xw = (xt.reshape(T * n, d) @ w_ih.data).reshape(T, n, 4 * hs) + bias.data
    gates = np.empty((T, n, 4 * hs))
    cs = np.zeros((T + 1, n, hs))
    hs_all = np.zeros((T + 1, n, hs))
    tcs = np.empty((T, n, hs))
    w_hh_d = w_hh.data
    for t in range(T):
        gt = gates[t]
        np.matmul(hs_all[t], w_hh_d, out=gt)
        gt += xw[t]
        cell = np.tanh(gt[:, 2 * hs : 3 * hs])
        gt[:] = _sigmoid(gt)
        gt[:, 2 * hs : 3 * hs] = cell
        c = gt[:, hs : 2 * hs] * cs[t] + gt[:, :hs] * cell
        tc = np.tanh(c)
        tcs[t] = tc
        h = gt[:, 3 * hs :] * tc
        if variable:
            m = active[t]
            c = m * c + (1.0 - m) * cs[t]
            h = m * h + (1.0 - m) * hs_all[t]
        cs[t + 1] = c
        hs_all[t + 1] = h

    def backward(g):
        gt_major = g.transpose(1, 0, 2)
        da_all = np.empty((T, n, 4 * hs))
        dh_next = np.zeros((n, hs))
        dc_next = np.zeros((n, hs))
        w_hh_t = w_hh.data.T
        for t in range(T - 1, -1, -1):
            dh = gt_major[t] + dh_next
            dc = dc_next
            gt = gates[t]
            gi, gf, gg, go = gt[:, :hs], gt[:, hs : 2 * hs], gt[:, 2 * hs : 3 * hs], gt[:, 3 * hs :]
            tc = tcs[t]
            if variable:
                m = active[t]
                skip_h, skip_c = dh * (1.0 - m), dc * (1.0 - m)
                dh, dc = dh * m, dc * m
            dc = dc + dh * go * (1.0 - tc * tc)
            da = da_all[t]
            da[:, :hs] = dc * gg * gi * (1.0 - gi)
            da[:, hs : 2 * hs] = dc * cs[t] * gf * (1.0 - gf)
            da[:, 2 * hs : 3 * hs] = dc * gi * (1.0 - gg * gg)
            da[:, 3 * hs :] = dh * tc * go * (1.0 - go)
            dh_next = da @ w_hh_t
            dc_next = dc * gf
            if variable:
                dh_next += skip_h
                dc_next += skip_c
        flat_da = da_all.reshape(T * n, 4 * hs)
        if x.requires_grad:
            _accum(x, (flat_da @ w_ih.data.T).reshape(T, n, d).transpose(1, 0, 2))
        if w_ih.requires_grad:
            _accum(w_ih, xt.reshape(T * n, d).T @ flat_da)
        if w_hh.requires_grad:
            _accum(w_hh, hs_all[:T].reshape(T * n, hs).T @ flat_da)
        _accum(bias, flat_da.sum(axis=0))

    return _make(np.ascontiguousarray(hs_all[1:].transpose(1, 0, 2)), (x, w_ih, w_hh, bias), backward)


def lstm_step_reference(x, h_prev, c_prev, w_ih, w_hh, bias):
    """Same cell composed from elementary ops; used to cross-check ``lstm_step``."""
    hs = h_prev.shape[1]
    a = matmul(x, w_ih) + matmul(h_prev, w_hh) + bias
    i = sigmoid(a[:, :hs])
    f = sigmoid(a[:, hs : 2 * hs])
    g = tanh(a[:, 2 * hs : 3 * hs])
    o = sigmoid(a[:, 3 * hs :])
    c = f * c_prev + i * g
    return o * tanh(c), c


# -- gradient utilities ------------------------------------------------------

def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if not math.isfinite(total):
        raise NumericError("non-finite gradient norm")
    if total > max_norm and total > 0:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


def flat_grad(params: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate(
        [(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params]
    )


def set_flat_grad(params: Sequence[Tensor], flat: np.ndarray) -> None:
    offset = 0
    for p in params:
        n = p.data.size
        p.grad = flat[offset : offset + n].reshape(p.shape).copy()
        offset += n
    if offset != flat.size:
        raise DimensionError(f"flat gradient has {flat.size} entries, parameters need {offset}")


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Compare autodiff gradients of scalar ``f()`` with central differences.

    Returns max |ad - fd| / max(1, |ad|, |fd|) over every coordinate.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-8, 1e-4], got {eps}")
    for p in params:
        p.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise NumericError("f returned a non-finite value")
    out.backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, ad in zip(params, analytic):
            flat = p.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                fp = float(f().data)
                flat[k] = orig - eps
                fm = float(f().data)
                flat[k] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError("f returned a non-finite value")
                fd = (fp - fm) / (2 * eps)
                a = float(ad.reshape(-1)[k])
                worst = max(worst, abs(a - fd) / max(1.0, abs(a), abs(fd)))
    return worst

"""Dense tensors, a reverse-mode gradient tape, and the differentiable
kernels the spiking graph models need.

The tape is a flat list of recorded operations in execution order; backward
walks it in reverse, accumulating gradients additively.  Operations run
untaped (pure numpy) when no tape is active or no input requires gradients,
which keeps evaluation cheap.
"""
from __future__ import annotations

import threading

import numpy as np

from .errors import InvalidRate, NonBinaryInput, ShapeMismatch

DTYPE = np.float32

# per-thread so independent training sessions can run in parallel
_TAPES = threading.local()


def _tape_stack() -> list:
    if not hasattr(_TAPES, "stack"):
        _TAPES.stack = []
    return _TAPES.stack


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.ops = []  # (output Tensor, backward callable)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out, backward_fn):
        self.ops.append((out, backward_fn))


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Row-major numeric array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data, inputs, backward_fn):
    """Create the output tensor and record it when gradients are needed."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to the given input shape after broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor):
    """Populate gradients of every parameter reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeMismatch("backward expects a scalar loss")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape.ops):
        if out.grad is not None:
            fn(out.grad)
            out.grad = None  # intermediates are freed; leaves keep theirs


# ---------------------------------------------------------------------------
# arithmetic kernels


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _result(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * DTYPE(c)

    def bwd(g):
        a.accumulate(g * DTYPE(c))

    return _result(data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _result(data, (a, b), bwd)


def _assert_binary(x: np.ndarray):
    if not np.all((x == 0) | (x == 1)):
        raise NonBinaryInput("expected entries in {0,1}")


def spike_matmul(spikes: Tensor, w: Tensor, counters=None) -> Tensor:
    """Event-driven matmul for binary inputs: gather-add over spike positions.

    Equals matmul(spikes, w) numerically, but is realized purely with
    additions; the counter records nnz * P additions and zero multiplies.
    """
    s = spikes.data
    if s.shape[-1] != w.data.shape[0]:
        raise ShapeMismatch(f"spike_matmul {s.shape} x {w.data.shape}")
    _assert_binary(s)
    n, p = s.shape[0], w.data.shape[1]
    rows, cols = np.nonzero(s)
    out = np.zeros((n, p), dtype=w.data.dtype)
    if rows.size:
        starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
        sums = np.add.reduceat(w.data[cols], starts, axis=0)
        out[rows[starts]] = sums
    if counters is not None:
        counters.transform_adds += int(rows.size) * p

    def bwd(g):
        if w.requires_grad:
            w.accumulate(s.T @ g)
        if spikes.requires_grad:
            spikes.accumulate(g @ w.data.T)

    return _result(out, (spikes, w), bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, DTYPE(slope) * x.data)

    def bwd(g):
        x.accumulate(np.where(mask, g, DTYPE(slope) * g))

    return _result(data, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0).astype(DTYPE)

    def bwd(g):
        x.accumulate(np.where(mask, g, 0.0))

    return _result(data, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        x.accumulate(data * (g - dot))

    return _result(data, (x,), bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    data = z - lse
    soft = np.exp(data)

    def bwd(g):
        x.accumulate(g - soft * g.sum(axis=-1, keepdims=True))

    return _result(data, (x,), bwd)


def dropout(x: Tensor, rate: float, rng, training: bool = True) -> Tensor:
    if not (0.0 <= rate < 1.0):
        raise InvalidRate(f"dropout rate {rate} outside [0,1)")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate)
    factor = DTYPE(1.0 / (1.0 - rate))
    data = x.data * keep * factor

    def bwd(g):
        x.accumulate(g * keep * factor)

    return _result(data, (x,), bwd)


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    data = x.data.mean(axis=axis)
    n = x.data.shape[axis]

    def bwd(g):
        x.accumulate(np.expand_dims(g, axis).repeat(n, axis=axis) / DTYPE(n))

    return _result(data, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=DTYPE)

    def bwd(g):
        x.accumulate(np.full_like(x.data, g))

    return _result(data, (x,), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t.accumulate(piece)

    return _result(data, tuple(tensors), bwd)


def stack(tensors) -> Tensor:
    """Stack [N,C] slices into [T,N,C]."""
    data = np.stack([t.data for t in tensors], axis=0)

    def bwd(g):
        for t, piece in zip(tensors, g):
            t.accumulate(piece)

    return _result(data, tuple(tensors), bwd)


def slice_first(x: Tensor, t: int) -> Tensor:
    """Select x[t] from a stacked [T,N,C] tensor."""
    data = x.data[t]

    def bwd(g):
        full = np.zeros_like(x.data)
        full[t] = g
        x.accumulate(full)

    return _result(data, (x,), bwd)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    data = x.data[idx]

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x.accumulate(full)

    return _result(data, (x,), bwd)


def pick(x: Tensor, row_idx, col_idx) -> Tensor:
    """out[i] = x[row_idx[i], col_idx[i]]."""
    row_idx = np.asarray(row_idx, dtype=np.int64)
    col_idx = np.asarray(col_idx, dtype=np.int64)
    data = x.data[row_idx, col_idx]

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (row_idx, col_idx), g)
        x.accumulate(full)

    return _result(data, (x,), bwd)


def segment_sum(x: Tensor, seg_ptr: np.ndarray) -> Tensor:
    """Sum contiguous row segments: out[s] = sum(x[seg_ptr[s]:seg_ptr[s+1]]).

    Empty segments produce zero rows.
    """
    nseg = len(seg_ptr) - 1
    shape = (nseg,) + x.data.shape[1:]
    data = np.zeros(shape, dtype=x.data.dtype)
    nonempty = np.flatnonzero(np.diff(seg_ptr) > 0)
    if nonempty.size:
        sums = np.add.reduceat(x.data, seg_ptr[nonempty], axis=0)
        data[nonempty] = sums
    seg_of = np.repeat(np.arange(nseg), np.diff(seg_ptr))

    def bwd(g):
        x.accumulate(g[seg_of])

    return _result(data, (x,), bwd)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data.copy())


def aggregate(adj, h: Tensor, counters=None) -> Tensor:
    """Sparse neighborhood aggregation: out = A_norm @ h.

    Backward aggregates the incoming gradient with the transposed adjacency,
    which is the same matrix for the symmetric graphs used here.
    """
    data = adj.spmm(h.data)
    if counters is not None:
        c = h.data.shape[-1]
        counters.aggregate_adds += adj.num_edges * c
        counters.aggregate_muls += adj.num_edges * c

    def bwd(g):
        h.accumulate(adj.spmm(np.asarray(g, dtype=h.data.dtype)))

    return _result(data, (h,), bwd)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Adam moments plus classic (gradient-additive) L2 weight decay."""

    def __init__(self, params: dict, lr=0.01, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict, state: AdamState):
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for k, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = state.m[k] / (1 - b1 ** t)
        v_hat = state.v[k] / (1 - b2 ** t)
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(DTYPE)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def fd_check(f, x: Tensor, step: float = 1e-3) -> float:
    """Max relative error between tape gradient and central differences.

    ``f`` must map a Tensor to a scalar Tensor along a path that is smooth
    at ``x``.  Evaluation runs in float64 so the difference quotient is not
    drowned by working-precision noise.
    """
    global DTYPE
    saved = DTYPE
    DTYPE = np.float64
    try:
        x64 = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True)
        with Tape() as tape:
            loss = f(x64)
            backward(tape, loss)
        analytic = np.array(x64.grad, dtype=np.float64)

        flat = x64.data.reshape(-1)
        fd = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(x64).data)
            flat[i] = orig - step
            lo = float(f(x64).data)
            flat[i] = orig
            fd[i] = (hi - lo) / (2 * step)
        fd = fd.reshape(x64.data.shape)
    finally:
        DTYPE = saved
    denom = np.maximum(np.abs(analytic) + np.abs(fd), 1e-6)
    return float(np.max(np.abs(analytic - fd) / denom))

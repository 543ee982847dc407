"""Neuron dynamics, the surrogate spike gradient, and coding schemes.

The membrane update follows a soft reset: the retained history of a neuron
that spiked on the previous step is zeroed via a (1 - h) factor.  The spike
nonlinearity is an exact step forward and a rectangular pass-through
gradient backward; the reset path is treated as constant during backward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import InvalidPenalty, NonBinaryInput, OutOfRange, ShapeMismatch
from .tensor import Tensor


@dataclass
class NeuronConfig:
    v_th: float = 0.25
    kappa: float = 1.0            # decay factor; 1.0 = non-leaky IF
    surrogate_width: float = 0.5  # rectangle width of the pass-through gradient

    def __post_init__(self):
        if self.v_th <= 0:
            raise ValueError("v_th must be positive")
        if not (0.0 <= self.kappa <= 1.0):
            raise ValueError("kappa must lie in [0,1]")
        if self.surrogate_width <= 0:
            raise ValueError("surrogate_width must be positive")


@dataclass
class NeuronState:
    v: Tensor   # membrane potentials [N, C]
    h: Tensor   # last spike outputs, binary [N, C]

    @staticmethod
    def zeros(shape):
        return NeuronState(Tensor(np.zeros(shape, dtype=tz.DTYPE)),
                           Tensor(np.zeros(shape, dtype=tz.DTYPE)))


@dataclass
class SpikeTensor:
    """Binary spike train of shape [T, N, C]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=tz.DTYPE)
        if not np.all((self.data == 0) | (self.data == 1)):
            raise NonBinaryInput("spike train entries must be 0/1")

    @property
    def t_len(self):
        return self.data.shape[0]


def heaviside_surrogate(v: Tensor, v_th: float, width: float) -> Tensor:
    """Exact step forward on (v - v_th); rectangular gradient backward.

    Backward passes (1/width) inside the window |v - v_th| < width/2 and
    zero outside.  Fires at the exact threshold (g(0) = 1).
    """
    u = v.data - tz.DTYPE(v_th)
    spikes = (u >= 0).astype(tz.DTYPE)
    window = (np.abs(u) < width / 2).astype(tz.DTYPE) / tz.DTYPE(width)

    def bwd(g):
        v.accumulate(g * window)

    return tz._result(spikes, (v,), bwd)


def lif_step(state: NeuronState, input_current: Tensor,
             cfg: NeuronConfig) -> NeuronState:
    """One membrane update with firing-and-reset (V_reset = 0).

    v_new = kappa * v * (1 - h) + I;  h_new = step(v_new - v_th).
    The (1 - h) reset mask uses the previous binary spikes as constants.
    """
    if state.v.data.shape != input_current.data.shape:
        raise ShapeMismatch(
            f"state {state.v.data.shape} vs current {input_current.data.shape}")
    reset_mask = Tensor(1.0 - state.h.data)  # constant during backward
    retained = tz.scale(tz.mul(state.v, reset_mask), cfg.kappa)
    v_new = tz.add(retained, input_current)
    h_new = heaviside_surrogate(v_new, cfg.v_th, cfg.surrogate_width)
    return NeuronState(v_new, h_new)


# ---------------------------------------------------------------------------
# rate coding


def encode_rate(x: np.ndarray, t_len: int, mode: str = "repeat",
                rng=None) -> SpikeTensor:
    """Unfold static node features into a [T, N, C] spike train."""
    x = np.asarray(x, dtype=tz.DTYPE)
    if mode == "repeat":
        if not np.all((x == 0) | (x == 1)):
            raise NonBinaryInput("repeat encoding needs binary input")
        data = np.broadcast_to(x, (t_len,) + x.shape).copy()
    elif mode == "bernoulli":
        if np.any(x < 0) or np.any(x > 1):
            raise OutOfRange("bernoulli encoding needs values in [0,1]")
        if rng is None:
            raise ValueError("bernoulli encoding needs an rng")
        data = (rng.random((t_len,) + x.shape) < x).astype(tz.DTYPE)
    else:
        raise ValueError(f"unknown encoding mode {mode!r}")
    return SpikeTensor(data)


def rate_decode(spikes: np.ndarray) -> np.ndarray:
    """Mean spike probability over the time axis of a [T, N, C] train."""
    spikes = np.asarray(spikes, dtype=tz.DTYPE)
    return spikes.mean(axis=0)


# ---------------------------------------------------------------------------
# rank-order coding


@dataclass
class RocState:
    """First-spike bookkeeping for one presynaptic ensemble.

    ``order`` holds the firing rank per neuron (-1 while unfired); ranks are
    assigned in arrival order with ties broken by neuron index.
    """

    r: float
    order: np.ndarray = None
    fired: np.ndarray = None

    def __post_init__(self):
        if not (0.0 < self.r < 1.0):
            raise InvalidPenalty(f"penalty constant {self.r} outside (0,1)")

    def init(self, shape):
        self.order = np.full(shape, -1, dtype=np.int64)
        self.fired = np.zeros(shape, dtype=bool)

    def observe(self, spikes: np.ndarray) -> np.ndarray:
        """Register this step's spikes; return the modulation factors.

        The factor is r^rank at a neuron's first spike position and 0
        everywhere else (repeat spikes are ignored).
        """
        if self.order is None:
            self.init(spikes.shape)
        new = (spikes > 0) & ~self.fired
        factors = np.zeros(spikes.shape, dtype=tz.DTYPE)
        if spikes.ndim == 1:
            idx = np.flatnonzero(new)
            base = int(self.fired.sum())
            self.order[idx] = base + np.arange(len(idx))
            factors[idx] = self.r ** self.order[idx]
        else:
            # rank independently per row (per-node ensembles); ties within a
            # step resolve in channel-index order via the cumulative count
            base = self.fired.sum(axis=-1, keepdims=True)
            ranks = base + np.cumsum(new, axis=-1) - 1
            self.order = np.where(new, ranks, self.order)
            factors = np.where(new, self.r ** np.maximum(ranks, 0),
                               0.0).astype(tz.DTYPE)
        self.fired |= new
        return factors


def roc_accumulate(ranks: np.ndarray, w: Tensor, state: RocState) -> Tensor:
    """Target potentials from first-spike ranks: sum_j r^rank(j) * w[j].

    Neurons with rank < 0 (never fired) contribute nothing.
    """
    ranks = np.asarray(ranks, dtype=np.int64)
    factors = np.where(ranks >= 0, state.r ** ranks.clip(min=0), 0.0)
    return tz.matmul(Tensor(factors.astype(tz.DTYPE).reshape(1, -1)), w)


def roc_decode(first_spike_step: np.ndarray,
               potential_at_first: np.ndarray = None,
               final_potential: np.ndarray = None) -> int:
    """Winner-takes-all over output channels.

    Earliest first spike wins; simultaneous firsts are broken by the larger
    membrane potential at that step, then by the lower index.  If nothing
    fired within the window, fall back to argmax of final potentials.
    """
    first = np.asarray(first_spike_step, dtype=np.int64)
    fired = first >= 0
    if not fired.any():
        if final_potential is None:
            return 0
        return int(np.argmax(final_potential))
    tmin = first[fired].min()
    cands = np.flatnonzero(fired & (first == tmin))
    if len(cands) > 1 and potential_at_first is not None:
        best = np.argmax(potential_at_first[cands])
        return int(cands[best])
    return int(cands[0])

"""Network assembly: spiking graph convolution and attention layers,
residual blocks, temporal unrolling, readout heads and the loss.

All inter-layer traffic is binary spikes; real values exist only inside a
layer (membrane currents) and after the final rate decode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import EmptyGraph, EmptyMask, ShapeMismatch
from .graph import CsrGraph, NormalizedAdjacency
from .metrics import OpCounters
from .neurons import NeuronConfig, NeuronState, RocState, encode_rate, heaviside_surrogate, lif_step
from .stfn import StfnParams, stfn_apply
from .tensor import Tensor


@dataclass
class ModelSpec:
    layer_kinds: list            # "gconv" | "gattn", one per spiking layer
    layer_widths: list           # output width per spiking layer
    residual: bool = False
    stfn: bool = True
    coding: str = "rate"         # "rate" | "roc"
    t_len: int = 8
    readout: str = "node"        # "node" | "graph"
    dropout: float = 0.1
    heads: int = 8
    v_th: float = 0.25
    kappa: float = 1.0
    surrogate_width: float = 0.5
    rho: float = 1.0
    roc_penalty: float = 0.5
    attn_slope: float = 0.2
    encoding: str = "repeat"     # "repeat" | "bernoulli"

    def __post_init__(self):
        if len(self.layer_kinds) != len(self.layer_widths):
            raise ValueError("layer_kinds and layer_widths must align")
        if self.coding not in ("rate", "roc"):
            raise ValueError(f"unknown coding {self.coding!r}")
        if self.readout not in ("node", "graph"):
            raise ValueError(f"unknown readout {self.readout!r}")

    @property
    def num_layers(self):
        return len(self.layer_widths)

    def neuron_config(self) -> NeuronConfig:
        return NeuronConfig(v_th=self.v_th, kappa=self.kappa,
                            surrogate_width=self.surrogate_width)


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(tz.DTYPE)


def init_params(spec: ModelSpec, in_dim: int, num_classes: int, rng) -> dict:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization of all
    trainable tensors, keyed by name."""
    params = {}
    prev = in_dim
    widths = list(spec.layer_widths)
    if spec.coding == "roc" and widths[-1] != num_classes:
        widths = widths + [num_classes]
    for i, width in enumerate(widths):
        kind = spec.layer_kinds[i] if i < len(spec.layer_kinds) else "gconv"
        name = f"layer{i}"
        if kind == "gattn":
            f_out = _head_dim(spec, i, width)
            params[f"{name}.w"] = tz.parameter(
                _uniform_init(rng, prev, (prev, spec.heads * f_out)))
            params[f"{name}.attn"] = tz.parameter(
                _uniform_init(rng, 2 * f_out, (spec.heads, 2 * f_out)))
        else:
            params[f"{name}.w"] = tz.parameter(_uniform_init(rng, prev, (prev, width)))
        params[f"{name}.b"] = tz.parameter(np.zeros(width, dtype=tz.DTYPE))
        if spec.stfn:
            params[f"{name}.lam"] = tz.parameter(np.ones(width, dtype=tz.DTYPE))
            params[f"{name}.gamma"] = tz.parameter(np.zeros(width, dtype=tz.DTYPE))
        if spec.residual and _is_block_second(spec, i):
            block_in = _block_in_dim(spec, i, in_dim)
            if block_in != width:
                params[f"{name}.proj"] = tz.parameter(
                    _uniform_init(rng, block_in, (block_in, width)))
        prev = width
    if spec.coding == "rate":
        d = prev
        params["head.w"] = tz.parameter(_uniform_init(rng, d, (d, d)))
        params["head.a"] = tz.parameter(_uniform_init(rng, d, (d, num_classes)))
    return params


def _head_dim(spec, i, width):
    """Per-head feature width of an attention layer."""
    last = i == spec.num_layers - 1
    if last:
        return width                 # heads averaged at the last layer
    if width % spec.heads != 0:
        raise ValueError(f"layer {i} width {width} not divisible by {spec.heads} heads")
    return width // spec.heads


def _is_block_second(spec, i):
    return spec.residual and i % 2 == 1


def _block_in_dim(spec, i, in_dim):
    widths = [in_dim] + list(spec.layer_widths)
    return widths[i - 1]


def layer_currents_gconv(spikes_t, adj: NormalizedAdjacency, w, b, counters,
                         roc_state=None):
    """Per-step pre-activation current of a graph-convolution layer.

    Transform first, then aggregate (the sparse/binary-friendly order):
    cur = G_c(A, spikes @ W + b).
    """
    if roc_state is None:
        z = tz.spike_matmul(spikes_t, w, counters)
    else:
        factors = roc_state.observe(spikes_t.data)
        modulated = Tensor(factors)
        z = tz.matmul(modulated, w)
        if counters is not None:
            nnz = int(np.count_nonzero(factors))
            counters.transform_adds += nnz * w.data.shape[1]
            counters.transform_muls += nnz
    z = tz.add(z, b)
    return tz.aggregate(adj, z, counters)


def layer_currents_gattn(spikes_t, g: CsrGraph, w, b, attn, spec, counters,
                         head_dim, average_heads, roc_state=None):
    """Per-step attention aggregation (multi-head).

    Scores e_ij = LeakyReLU(a^T [z_i || z_j]) are softmax-normalized over
    each in-neighborhood; head outputs are concatenated (hidden layers) or
    averaged (final layer).
    """
    if roc_state is None:
        z = tz.spike_matmul(spikes_t, w, counters)
    else:
        factors = roc_state.observe(spikes_t.data)
        z = tz.matmul(Tensor(factors), w)
    heads = spec.heads
    row_ptr, col_idx = g.row_ptr, g.col_idx
    rows = np.repeat(np.arange(g.num_nodes, dtype=np.int64), np.diff(row_ptr))
    outs = []
    for h in range(heads):
        zh = _slice_cols(z, h * head_dim, (h + 1) * head_dim)
        a_l = _slice_vec(attn, h, 0, head_dim)
        a_r = _slice_vec(attn, h, head_dim, 2 * head_dim)
        si = tz.matmul(zh, _as_col(a_l))            # [N,1]
        sj = tz.matmul(zh, _as_col(a_r))            # [N,1]
        e = tz.add(tz.gather_rows(si, rows), tz.gather_rows(sj, col_idx))
        e = tz.leaky_relu(e, spec.attn_slope)
        alpha = _segment_softmax(e, row_ptr, rows)   # [E,1]
        zj = tz.gather_rows(zh, col_idx)             # [E,F]
        weighted = tz.mul(zj, alpha)
        outs.append(tz.segment_sum(weighted, row_ptr))
        if counters is not None:
            counters.aggregate_adds += len(col_idx) * head_dim
            counters.aggregate_muls += len(col_idx) * head_dim
    if average_heads:
        out = outs[0]
        for o in outs[1:]:
            out = tz.add(out, o)
        out = tz.scale(out, 1.0 / heads)
    else:
        out = tz.concat(outs, axis=-1)
    return tz.add(out, b)  # bias on the combined aggregated current


def _slice_cols(x, lo, hi):
    data = x.data[:, lo:hi]

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        x.accumulate(full)

    return tz._result(data, (x,), bwd)


def _slice_vec(x, row, lo, hi):
    data = x.data[row, lo:hi]

    def bwd(g):
        full = np.zeros_like(x.data)
        full[row, lo:hi] = g
        x.accumulate(full)

    return tz._result(data, (x,), bwd)


def _as_col(v):
    data = v.data.reshape(-1, 1)

    def bwd(g):
        v.accumulate(g.reshape(v.data.shape))

    return tz._result(data, (v,), bwd)


def _segment_softmax(e, row_ptr, rows):
    """Softmax of edge scores over each row segment (numerically shifted)."""
    nseg = len(row_ptr) - 1
    shift = np.full(nseg, -np.inf, dtype=np.float64)
    np.maximum.at(shift, rows, e.data[:, 0].astype(np.float64))
    shift = np.where(np.isfinite(shift), shift, 0.0).astype(tz.DTYPE)
    shifted = tz.add(e, Tensor(-shift[rows][:, None]))
    ex = _exp(shifted)
    denom = tz.segment_sum(ex, row_ptr)              # [N,1]
    return tz.mul(ex, _reciprocal_gather(denom, rows))


def _exp(x):
    data = np.exp(x.data)

    def bwd(g):
        x.accumulate(g * data)

    return tz._result(data, (x,), bwd)


def _reciprocal_gather(x, rows):
    """1 / x gathered per edge row; zero-degree rows never appear in rows."""
    gathered = x.data[rows]
    data = 1.0 / gathered

    def bwd(g):
        contrib = -g / (gathered * gathered)
        full = np.zeros_like(x.data)
        np.add.at(full, rows, contrib)
        x.accumulate(full)

    return tz._result(data, (x,), bwd)


def spiking_layer_forward(spike_list, layer_idx, kind, spec, params, graph,
                          adj, counters, rng, training, extra_currents=None,
                          metrics_sink=None):
    """Unroll one spiking layer over the time window.

    Buffers the whole window of pre-activation currents, optionally
    normalizes them jointly (two-phase forward), then runs the neuron
    dynamics step by step.  Returns the output spike tensors per step.
    """
    name = f"layer{layer_idx}"
    w, b = params[f"{name}.w"], params[f"{name}.b"]
    t_len = len(spike_list)
    roc_state = RocState(spec.roc_penalty) if spec.coding == "roc" else None
    currents = []
    for t, s_t in enumerate(spike_list):
        if kind == "gattn":
            head_dim = _head_dim(spec, layer_idx, w.data.shape[1])
            cur = layer_currents_gattn(
                s_t, graph, w, b, params[f"{name}.attn"], spec, counters,
                head_dim, average_heads=(layer_idx == spec.num_layers - 1),
                roc_state=roc_state)
        else:
            cur = layer_currents_gconv(s_t, adj, w, b, counters,
                                       roc_state=roc_state)
        if extra_currents is not None:
            cur = tz.add(cur, extra_currents[t])
        if training and spec.dropout > 0:
            cur = tz.dropout(cur, spec.dropout, rng, training=True)
        currents.append(cur)

    if spec.stfn:
        window = tz.stack(currents)
        sp = StfnParams(lam=params[f"{name}.lam"], gamma=params[f"{name}.gamma"],
                        rho=spec.rho)
        window = stfn_apply(window, sp, spec.v_th)
        currents = [tz.slice_first(window, t) for t in range(t_len)]

    cfg = spec.neuron_config()
    state = NeuronState.zeros(currents[0].data.shape)
    out_spikes, potentials = [], []
    for cur in currents:
        state = lif_step(state, cur, cfg)
        out_spikes.append(state.h)
        potentials.append(state.v)
    if metrics_sink is not None:
        rate = float(np.mean([h.data.mean() for h in out_spikes]))
        metrics_sink.append(rate)
    return out_spikes, potentials, currents


def model_forward(x: np.ndarray, graph: CsrGraph, adj: NormalizedAdjacency,
                  spec: ModelSpec, params: dict, counters: OpCounters = None,
                  rng=None, training: bool = False, collect=None):
    """End-to-end forward pass: encode -> unroll layers over T -> decode.

    Returns node logits [N, classes] (node readout) or graph logits
    [classes] (graph readout).  ``collect``, when given, is a dict that
    receives probe outputs (per-layer firing rates, spike trains, decoded
    features, ROC first-spike info).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    spikes_in = encode_rate(x, spec.t_len, mode=spec.encoding, rng=rng)
    spike_list = [Tensor(spikes_in.data[t]) for t in range(spec.t_len)]

    widths = list(spec.layer_widths)
    kinds = list(spec.layer_kinds)
    if spec.coding == "roc" and f"layer{len(widths)}.w" in params:
        widths.append(params[f"layer{len(widths)}.w"].data.shape[1])
        kinds.append("gconv")

    rates = []
    layer_spike_trains = []
    block_input = None
    potentials = None
    for i, kind in enumerate(kinds):
        extra = None
        if spec.residual:
            if i % 2 == 0:
                block_input = spike_list
            else:
                name = f"layer{i}"
                if f"{name}.proj" in params:
                    extra = [tz.matmul(s, params[f"{name}.proj"])
                             for s in block_input]
                else:
                    extra = [s for s in block_input]  # identity shortcut current
        spike_list, potentials, _ = spiking_layer_forward(
            spike_list, i, kind, spec, params, graph, adj, counters, rng,
            training, extra_currents=extra, metrics_sink=rates)
        layer_spike_trains.append(np.stack([s.data for s in spike_list]))

    if collect is not None:
        collect["firing_rates"] = rates
        collect["spike_trains"] = layer_spike_trains

    if spec.coding == "roc":
        # training signal: time-averaged membrane potential of the output
        # layer; inference decode: first-spike winner-takes-all
        logits = tz.scale(_sum_tensors(potentials), 1.0 / spec.t_len)
        if collect is not None:
            collect["roc_first_spike"] = _first_spike_steps(layer_spike_trains[-1])
            collect["roc_potentials"] = np.stack([p.data for p in potentials])
        if spec.readout == "graph":
            logits = tz.mean_over_axis(logits, 0)
        return logits

    decoded = tz.scale(_sum_tensors(spike_list), 1.0 / spec.t_len)
    if collect is not None:
        collect["decoded"] = decoded.data.copy()
    if training and spec.dropout > 0:
        decoded = tz.dropout(decoded, spec.dropout, rng, training=True)
    if spec.readout == "graph":
        return readout_graph(decoded, params)
    return readout_node(decoded, params)


def _sum_tensors(tensors):
    out = tensors[0]
    for t in tensors[1:]:
        out = tz.add(out, t)
    return out


def _first_spike_steps(train: np.ndarray) -> np.ndarray:
    """First firing step per (node, channel); -1 when silent. [T,N,C] -> [N,C]"""
    t_len = train.shape[0]
    fired = train > 0
    first = np.where(fired.any(axis=0), fired.argmax(axis=0), -1)
    return first.astype(np.int64)


def readout_node(decoded: Tensor, params: dict) -> Tensor:
    """Two-layer per-node head: logits = ReLU(h W) A."""
    if decoded.data.shape[-1] != params["head.w"].data.shape[0]:
        raise ShapeMismatch("decoded width does not match readout head")
    hidden = tz.relu(tz.matmul(decoded, params["head.w"]))
    return tz.matmul(hidden, params["head.a"])


def readout_graph(decoded: Tensor, params: dict) -> Tensor:
    """Mean-pool nodes, then the two-layer head; logits shape [classes]."""
    if decoded.data.shape[0] == 0:
        raise EmptyGraph("cannot pool an empty graph")
    pooled = tz.mean_over_axis(decoded, 0)           # [d]
    pooled2 = _as_row(pooled)
    hidden = tz.relu(tz.matmul(pooled2, params["head.w"]))
    logits = tz.matmul(hidden, params["head.a"])
    return _as_vec(logits)


def _as_row(v):
    data = v.data.reshape(1, -1)

    def bwd(g):
        v.accumulate(g.reshape(v.data.shape))

    return tz._result(data, (v,), bwd)


def _as_vec(x):
    data = x.data.reshape(-1)

    def bwd(g):
        x.accumulate(g.reshape(x.data.shape))

    return tz._result(data, (x,), bwd)


def loss_cross_entropy(logits: Tensor, labels: np.ndarray, mask) -> Tensor:
    """Summed cross-entropy over the labeled node set Y_L."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise EmptyMask("loss needs at least one labeled node")
    labels = np.asarray(labels, dtype=np.int64)
    log_probs = tz.log_softmax_rows(logits)
    picked = tz.pick(log_probs, mask, labels[mask])
    return tz.scale(tz.sum_all(picked), -1.0)


def loss_cross_entropy_single(logits: Tensor, label: int) -> Tensor:
    """Cross-entropy for one graph-level logit vector."""
    row = _as_row(logits) if logits.data.ndim == 1 else logits
    return loss_cross_entropy(row, np.asarray([label]), np.asarray([0]))

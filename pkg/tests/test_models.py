import numpy as np
import pytest

from spikegraph import tensor as tz
from spikegraph.errors import EmptyMask, ShapeMismatch
from spikegraph.graph import build_csr, permute, sym_normalize
from spikegraph.metrics import OpCounters
from spikegraph.models import (ModelSpec, init_params, layer_currents_gattn,
                               loss_cross_entropy, model_forward, readout_graph,
                               readout_node)
from spikegraph.tensor import Tape, Tensor, backward, fd_check, parameter


def rng(seed=0):
    return np.random.default_rng(seed)


def toy_graph(n=3, edges=((0, 1), (1, 2))):
    g = build_csr(list(edges), n)
    return g, sym_normalize(g, add_self_loops=True)


def make_spec(**kw):
    base = dict(layer_kinds=["gconv"], layer_widths=[4], stfn=False,
                t_len=2, dropout=0.0, v_th=0.25)
    base.update(kw)
    return ModelSpec(**base)


# ----------------------------------------------------------------- GC-SNN path

def test_identity_pipeline_replays_input():
    # self-loop-only graph, W=I, bias pushes current over threshold at spikes
    g, adj = toy_graph(3, edges=())
    spec = make_spec(layer_widths=[3], t_len=3)
    params = init_params(spec, 3, 2, rng())
    params["layer0.w"].data = np.eye(3, dtype=np.float32)
    params["layer0.b"].data = np.zeros(3, dtype=np.float32)
    x = np.array([[1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=np.float32)
    collect = {}
    model_forward(x, g, adj, spec, params, collect=collect)
    out = collect["spike_trains"][0]
    for t in range(3):
        assert np.array_equal(out[t], x)


def test_zero_input_no_spikes_with_stfn_gamma_zero():
    g, adj = toy_graph()
    spec = make_spec(stfn=True)
    params = init_params(spec, 2, 2, rng(1))
    x = np.zeros((3, 2), dtype=np.float32)
    collect = {}
    model_forward(x, g, adj, spec, params, collect=collect)
    assert collect["firing_rates"][0] == 0.0


def test_hand_traced_two_node_layer():
    # 2-node path graph, T=2: engine matches a step-by-step scalar simulation
    g = build_csr([(0, 1)], 2)
    adj = sym_normalize(g, add_self_loops=True)
    spec = make_spec(layer_widths=[1], t_len=2)
    params = init_params(spec, 2, 2, rng(2))
    w = np.array([[0.5], [0.25]], dtype=np.float32)
    b = np.array([0.125], dtype=np.float32)
    params["layer0.w"].data = w
    params["layer0.b"].data = b
    x = np.array([[1, 0], [1, 1]], dtype=np.float32)

    collect = {}
    model_forward(x, g, adj, spec, params, collect=collect)
    got = collect["spike_trains"][0]

    # reference: scalar evaluation of transform -> aggregate -> IF dynamics
    a = adj.to_dense()
    v = np.zeros((2, 1), dtype=np.float32)
    h = np.zeros((2, 1), dtype=np.float32)
    for t in range(2):
        z = x @ w + b
        cur = a @ z
        v = v * (1 - h) + cur
        h = (v - 0.25 >= 0).astype(np.float32)
        assert np.allclose(got[t], h, atol=1e-6)


def test_op_counters_update():
    g, adj = toy_graph()
    spec = make_spec()
    params = init_params(spec, 2, 2, rng(3))
    x = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.float32)
    counters = OpCounters()
    model_forward(x, g, adj, spec, params, counters=counters)
    nnz = int(x.sum())
    # first layer: nnz * width additions per step, no multiplies
    assert counters.transform_adds >= nnz * 4 * spec.t_len
    assert counters.transform_muls == 0
    assert counters.aggregate_adds > 0


# ---------------------------------------------------------------- permutation

@pytest.mark.parametrize("stfn", [False, True])
def test_model_permutation_equivariance(stfn):
    r = rng(4)
    n = 8
    mask = np.triu(r.random((n, n)) < 0.4, k=1)
    g = build_csr(list(zip(*np.nonzero(mask))), n)
    adj = sym_normalize(g, True)
    spec = make_spec(layer_kinds=["gconv", "gconv"], layer_widths=[5, 3],
                     stfn=stfn, t_len=4)
    params = init_params(spec, 6, 3, rng(5))
    x = (r.random((n, 6)) < 0.4).astype(np.float32)

    logits = model_forward(x, g, adj, spec, params).data
    perm = r.permutation(n)
    pg = permute(g, perm)
    padj = permute(adj, perm)
    px = np.empty_like(x)
    px[perm] = x
    plogits = model_forward(px, pg, padj, spec, params).data
    expected = np.empty_like(logits)
    expected[perm] = logits
    assert np.allclose(plogits, expected, atol=1e-5)


def test_graph_readout_isomorphism_invariant():
    r = rng(6)
    n = 6
    mask = np.triu(r.random((n, n)) < 0.5, k=1)
    g = build_csr(list(zip(*np.nonzero(mask))), n)
    adj = sym_normalize(g, True)
    spec = make_spec(readout="graph", t_len=3)
    params = init_params(spec, 4, 3, rng(7))
    x = (r.random((n, 4)) < 0.5).astype(np.float32)
    base = model_forward(x, g, adj, spec, params).data
    perm = r.permutation(n)
    px = np.empty_like(x)
    px[perm] = x
    out = model_forward(px, permute(g, perm), permute(adj, perm), spec, params).data
    assert np.allclose(out, base, atol=1e-5)


# ------------------------------------------------------------------ attention

def dense_attention_oracle(adj_dense, z, a_l, a_r, slope):
    n = adj_dense.shape[0]
    scores = np.full((n, n), -np.inf)
    for i in range(n):
        for j in range(n):
            if adj_dense[i, j]:
                e = z[i] @ a_l + z[j] @ a_r
                scores[i, j] = e if e > 0 else slope * e
    alpha = np.zeros_like(scores)
    out = np.zeros_like(z)
    for i in range(n):
        nb = np.isfinite(scores[i])
        ex = np.exp(scores[i][nb] - scores[i][nb].max())
        alpha[i, nb] = ex / ex.sum()
        out[i] = alpha[i][nb] @ z[nb]
    return alpha, out


def test_attention_matches_dense_oracle():
    # 3-node star with self-loops, single head
    g = build_csr([(0, 1), (0, 2)], 3)
    gl = build_csr([(0, 1), (0, 2), (0, 0), (1, 1), (2, 2)], 3,
                   allow_self_loops=True)
    r = rng(8)
    spec = make_spec(layer_kinds=["gattn"], layer_widths=[3], heads=1,
                     t_len=1, attn_slope=0.2)
    params = init_params(spec, 2, 3, rng(9))
    w = params["layer0.w"]
    attn = params["layer0.attn"]
    x = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.float32)
    out = layer_currents_gattn(Tensor(x), gl, w, Tensor(np.zeros(3, dtype=np.float32)),
                               attn, spec, None, head_dim=3, average_heads=True)
    z = x @ w.data
    alpha, ref = dense_attention_oracle(gl.to_dense() > 0, z,
                                        attn.data[0, :3], attn.data[0, 3:], 0.2)
    assert np.allclose(out.data, ref, atol=1e-5)


def test_attention_single_neighbor_alpha_one():
    gl = build_csr([(0, 1)], 2)
    spec = make_spec(layer_kinds=["gattn"], layer_widths=[2], heads=1, t_len=1)
    params = init_params(spec, 2, 2, rng(10))
    x = np.array([[0, 1], [1, 0]], dtype=np.float32)
    out = layer_currents_gattn(Tensor(x), gl, params["layer0.w"],
                               Tensor(np.zeros(2, dtype=np.float32)),
                               params["layer0.attn"], spec, None,
                               head_dim=2, average_heads=True)
    z = x @ params["layer0.w"].data
    # alpha = 1 over the singleton neighborhood regardless of parameters
    assert np.allclose(out.data[0], z[1], atol=1e-6)
    assert np.allclose(out.data[1], z[0], atol=1e-6)


def test_attention_rows_sum_to_one():
    r = rng(11)
    n = 7
    mask = np.triu(r.random((n, n)) < 0.6, k=1)
    edges = list(zip(*np.nonzero(mask))) + [(i, i) for i in range(n)]
    gl = build_csr(edges, n, allow_self_loops=True)
    spec = make_spec(layer_kinds=["gattn"], layer_widths=[4], heads=2,
                     t_len=2, stfn=False)
    params = init_params(spec, 3, 2, rng(12))
    x = (r.random((n, 3)) < 0.5).astype(np.float32)

    # recompute alpha directly from the engine's building blocks
    from spikegraph.models import _segment_softmax, _slice_cols, _as_col, _slice_vec
    z = tz.spike_matmul(Tensor(x), params["layer0.w"])
    rows = np.repeat(np.arange(n), np.diff(gl.row_ptr))
    for h in range(2):
        zh = _slice_cols(z, h * 2, (h + 1) * 2)
        a_l = _slice_vec(params["layer0.attn"], h, 0, 2)
        a_r = _slice_vec(params["layer0.attn"], h, 2, 4)
        e = tz.add(tz.gather_rows(tz.matmul(zh, _as_col(a_l)), rows),
                   tz.gather_rows(tz.matmul(zh, _as_col(a_r)), gl.col_idx))
        alpha = _segment_softmax(tz.leaky_relu(e, 0.2), gl.row_ptr, rows)
        sums = np.zeros(n)
        np.add.at(sums, rows, alpha.data[:, 0])
        present = np.diff(gl.row_ptr) > 0
        assert np.allclose(sums[present], 1.0, atol=1e-6)


def test_attention_gradient_fd():
    gl = build_csr([(0, 1), (1, 2), (0, 0), (1, 1), (2, 2)], 3,
                   allow_self_loops=True)
    spec = make_spec(layer_kinds=["gattn"], layer_widths=[2], heads=1, t_len=1)
    params = init_params(spec, 2, 2, rng(13))
    x = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.float32)
    probe = Tensor(rng(14).standard_normal((3, 2)).astype(np.float32))

    def f_attn(t):
        out = layer_currents_gattn(Tensor(x), gl, params["layer0.w"],
                                   Tensor(np.zeros(2, dtype=np.float32)), t,
                                   spec, None, head_dim=2, average_heads=True)
        return tz.sum_all(tz.mul(out, probe))

    a = parameter(params["layer0.attn"].data.copy())
    assert fd_check(f_attn, a) < 1e-3

    def f_w(t):
        out = layer_currents_gattn(Tensor(x), gl, t,
                                   Tensor(np.zeros(2, dtype=np.float32)),
                                   params["layer0.attn"], spec, None,
                                   head_dim=2, average_heads=True)
        return tz.sum_all(tz.mul(out, probe))

    w = parameter(params["layer0.w"].data.copy())
    assert fd_check(f_w, w) < 1e-3


# ------------------------------------------------------------------- residual

def test_residual_zero_weight_block_passes_shortcut():
    g, adj = toy_graph()
    spec = make_spec(layer_kinds=["gconv", "gconv"], layer_widths=[2, 2],
                     residual=True, t_len=2)
    params = init_params(spec, 2, 2, rng(15))
    params["layer0.w"].data[:] = 0
    params["layer1.w"].data[:] = 0
    params["layer0.b"].data[:] = 0
    params["layer1.b"].data[:] = 0
    x = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.float32)
    collect = {}
    model_forward(x, g, adj, spec, params, collect=collect)
    # with zero weights the only current into layer 1 is the shortcut
    # (the input spikes), so spikes appear exactly where x >= v_th
    out = collect["spike_trains"][1]
    assert np.array_equal(out[0], (x >= 0.25).astype(np.float32))


def test_residual_projection_engages_on_width_change():
    spec = make_spec(layer_kinds=["gconv", "gconv"], layer_widths=[3, 5],
                     residual=True)
    params = init_params(spec, 2, 2, rng(16))
    assert "layer1.proj" in params
    assert params["layer1.proj"].data.shape == (2, 5)


def test_residual_matches_hand_trace():
    g = build_csr([(0, 1)], 2)
    adj = sym_normalize(g, True)
    spec = make_spec(layer_kinds=["gconv", "gconv"], layer_widths=[1, 1],
                     residual=True, t_len=2)
    params = init_params(spec, 1, 2, rng(17))
    w0 = np.array([[0.5]], dtype=np.float32)
    w1 = np.array([[0.25]], dtype=np.float32)
    for k, v in (("layer0.w", w0), ("layer1.w", w1)):
        params[k].data = v
    params["layer0.b"].data[:] = 0.125
    params["layer1.b"].data[:] = 0.0625
    x = np.array([[1], [0]], dtype=np.float32)
    collect = {}
    model_forward(x, g, adj, spec, params, collect=collect)

    a = adj.to_dense()
    v0 = np.zeros((2, 1), dtype=np.float32)
    h0 = np.zeros((2, 1), dtype=np.float32)
    v1 = np.zeros((2, 1), dtype=np.float32)
    h1 = np.zeros((2, 1), dtype=np.float32)
    for t in range(2):
        cur0 = a @ (x @ w0 + 0.125)
        v0 = v0 * (1 - h0) + cur0
        h0 = (v0 >= 0.25).astype(np.float32)
        cur1 = a @ (h0 @ w1 + 0.0625) + x  # identity shortcut current
        v1 = v1 * (1 - h1) + cur1
        h1 = (v1 >= 0.25).astype(np.float32)
        assert np.allclose(collect["spike_trains"][1][t], h1, atol=1e-6)


# ------------------------------------------------------------------- readouts

def test_readout_node_oracle():
    r = rng(18)
    params = {"head.w": Tensor(r.standard_normal((4, 4)).astype(np.float32)),
              "head.a": Tensor(r.standard_normal((4, 3)).astype(np.float32))}
    h = r.random((5, 4)).astype(np.float32)
    out = readout_node(Tensor(h), params)
    ref = np.maximum(h @ params["head.w"].data, 0) @ params["head.a"].data
    assert np.allclose(out.data, ref, atol=1e-6)


def test_readout_node_zero_weights():
    params = {"head.w": Tensor(np.zeros((4, 4))), "head.a": Tensor(np.zeros((4, 3)))}
    out = readout_node(Tensor(np.ones((2, 4))), params)
    assert np.all(out.data == 0)


def test_readout_graph_single_node_and_symmetry():
    r = rng(19)
    params = {"head.w": Tensor(r.standard_normal((3, 3)).astype(np.float32)),
              "head.a": Tensor(r.standard_normal((3, 2)).astype(np.float32))}
    h1 = r.random((1, 3)).astype(np.float32)
    single = readout_graph(Tensor(h1), params)
    ref = np.maximum(h1 @ params["head.w"].data, 0) @ params["head.a"].data
    assert np.allclose(single.data, ref[0], atol=1e-6)
    # identical node features: pool equals any node
    h = np.tile(h1, (4, 1))
    pooled = readout_graph(Tensor(h), params)
    assert np.allclose(pooled.data, single.data, atol=1e-6)


def test_readout_gradients_fd():
    r = rng(20)
    h = Tensor(r.random((4, 3)).astype(np.float32) + 0.1)
    a_head = Tensor(r.standard_normal((3, 2)).astype(np.float32))
    probe = Tensor(r.standard_normal((4, 2)).astype(np.float32))

    def f(t):
        params = {"head.w": t, "head.a": a_head}
        return tz.sum_all(tz.mul(readout_node(h, params), probe))

    w = parameter(r.standard_normal((3, 3)))
    assert fd_check(f, w) < 1e-3


# ----------------------------------------------------------------------- loss

def test_loss_uniform_logits_closed_form():
    n, k = 10, 7
    logits = Tensor(np.zeros((n, k)))
    mask = np.arange(4)
    labels = np.zeros(n, dtype=np.int64)
    loss = loss_cross_entropy(logits, labels, mask)
    assert float(loss.data) == pytest.approx(4 * np.log(k), rel=1e-5)


def test_loss_perfect_prediction_near_zero():
    labels = np.array([0, 1])
    logits = np.full((2, 2), -50.0)
    logits[0, 0] = 50.0
    logits[1, 1] = 50.0
    loss = loss_cross_entropy(Tensor(logits), labels, np.arange(2))
    assert float(loss.data) < 1e-5


def test_loss_mask_additivity():
    r = rng(21)
    logits = Tensor(r.standard_normal((5, 3)).astype(np.float32))
    labels = r.integers(0, 3, 5)
    total = float(loss_cross_entropy(logits, labels, np.arange(5)).data)
    parts = sum(float(loss_cross_entropy(logits, labels, np.array([i])).data)
                for i in range(5))
    assert total == pytest.approx(parts, rel=1e-5)


def test_loss_empty_mask_raises():
    with pytest.raises(EmptyMask):
        loss_cross_entropy(Tensor(np.zeros((2, 2))), np.zeros(2, dtype=int),
                           np.array([], dtype=int))


def test_loss_gradient_uniform_is_softmax_minus_onehot():
    n, k = 4, 3
    logits = parameter(np.zeros((n, k)))
    labels = np.array([0, 1, 2, 0])
    with Tape() as tape:
        backward(tape, loss_cross_entropy(logits, labels, np.arange(n)))
    onehot = np.eye(k)[labels]
    assert np.allclose(logits.grad, 1 / k - onehot, atol=1e-6)


def test_loss_gradient_fd():
    r = rng(22)
    logits = parameter(r.standard_normal((5, 4)))
    labels = r.integers(0, 4, 5)
    mask = np.array([0, 2, 4])
    assert fd_check(lambda t: loss_cross_entropy(t, labels, mask), logits) < 1e-3


# ------------------------------------------------------------------------ roc

def test_roc_model_collects_first_spikes():
    g, adj = toy_graph()
    spec = make_spec(coding="roc", layer_widths=[4], t_len=4)
    params = init_params(spec, 2, 2, rng(23))
    x = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.float32)
    collect = {}
    logits = model_forward(x, g, adj, spec, params, collect=collect)
    assert logits.data.shape == (3, 2)          # output layer width = classes
    assert collect["roc_first_spike"].shape == (3, 2)
    assert collect["roc_potentials"].shape == (4, 3, 2)


def test_cora_shape_configuration_typechecks():
    # [Input-400-16-Output] on Cora-like shapes, 1 step to keep it cheap
    r = rng(24)
    n, c, classes = 50, 1433, 7
    mask = np.triu(r.random((n, n)) < 0.1, k=1)
    g = build_csr(list(zip(*np.nonzero(mask))), n)
    adj = sym_normalize(g, True)
    spec = make_spec(layer_kinds=["gconv", "gconv"], layer_widths=[400, 16],
                     t_len=1)
    params = init_params(spec, c, classes, rng(25))
    x = (r.random((n, c)) < 0.02).astype(np.float32)
    logits = model_forward(x, g, adj, spec, params)
    assert logits.data.shape == (n, classes)

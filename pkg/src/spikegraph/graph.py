"""Sparse graph storage, symmetric normalization, permutation utilities and
stochastic-block-model generation.

Graphs are stored in compressed-row (CSR) form.  The raw adjacency never
contains self-loops; normalization optionally augments the diagonal before
computing degree-based edge weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import IndexOutOfRange, IsolatedNode, NotABijection, SelfLoopRejected, ShapeMismatch


@dataclass
class CsrGraph:
    """Immutable sparse adjacency in compressed-row form."""

    num_nodes: int
    row_ptr: np.ndarray   # int64, length num_nodes + 1
    col_idx: np.ndarray   # int64, sorted within each row
    edge_weight: np.ndarray  # float32, same length as col_idx

    @property
    def num_edges(self) -> int:
        return int(len(self.col_idx))

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def neighbors(self, v: int) -> np.ndarray:
        return self.col_idx[self.row_ptr[v]:self.row_ptr[v + 1]]

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.edge_weight, self.col_idx, self.row_ptr),
            shape=(self.num_nodes, self.num_nodes),
        )

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()


@dataclass
class NormalizedAdjacency(CsrGraph):
    """CSR adjacency with 1/sqrt(d_u * d_v) edge weights."""

    self_loops_added: bool = False
    _scipy: sp.csr_matrix = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self._scipy = sp.csr_matrix(
            (self.edge_weight, self.col_idx, self.row_ptr),
            shape=(self.num_nodes, self.num_nodes),
        )

    def spmm(self, h: np.ndarray) -> np.ndarray:
        """Aggregate dense node features: out[v] = sum_u w(v,u) * h[u]."""
        if h.shape[0] != self.num_nodes:
            raise ShapeMismatch(
                f"feature rows {h.shape[0]} != num_nodes {self.num_nodes}")
        return np.asarray(self._scipy @ h, dtype=h.dtype)


def build_csr(edges, num_nodes: int, symmetric: bool = True,
              allow_self_loops: bool = False) -> CsrGraph:
    """Build a CSR graph from an edge list.

    Duplicate edges are deduplicated; with ``symmetric`` each pair is stored
    in both directions.  Self-loops are rejected in the raw adjacency.
    """
    pairs = []
    for u, v in edges:
        u, v = int(u), int(v)
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise IndexOutOfRange(f"edge ({u},{v}) outside [0,{num_nodes})")
        if u == v and not allow_self_loops:
            raise SelfLoopRejected(f"self-loop at node {u}")
        pairs.append((u, v))
        if symmetric and u != v:
            pairs.append((v, u))
    if pairs:
        arr = np.unique(np.asarray(pairs, dtype=np.int64), axis=0)
        rows, cols = arr[:, 0], arr[:, 1]
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
    row_ptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(row_ptr, rows + 1, 1)
    row_ptr = np.cumsum(row_ptr)
    weights = np.ones(len(cols), dtype=np.float32)
    return CsrGraph(num_nodes, row_ptr, cols, weights)


def sym_normalize(g: CsrGraph, add_self_loops: bool = True) -> NormalizedAdjacency:
    """Symmetric degree normalization: w(u,v) = 1 / sqrt(d_u * d_v).

    Degrees are counted after the optional self-loop augmentation.  Without
    self-loops every node must have degree >= 1.
    """
    if add_self_loops:
        rows = np.repeat(np.arange(g.num_nodes, dtype=np.int64), np.diff(g.row_ptr))
        rows = np.concatenate([rows, np.arange(g.num_nodes, dtype=np.int64)])
        cols = np.concatenate([g.col_idx, np.arange(g.num_nodes, dtype=np.int64)])
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        row_ptr = np.zeros(g.num_nodes + 1, dtype=np.int64)
        np.add.at(row_ptr, rows + 1, 1)
        row_ptr = np.cumsum(row_ptr)
    else:
        row_ptr, cols = g.row_ptr.copy(), g.col_idx.copy()
    deg = np.diff(row_ptr)
    if np.any(deg == 0):
        bad = int(np.argmax(deg == 0))
        raise IsolatedNode(f"node {bad} has degree 0 and self-loops are off")
    inv_sqrt = 1.0 / np.sqrt(deg.astype(np.float64))
    row_of = np.repeat(np.arange(g.num_nodes, dtype=np.int64), deg)
    weights = (inv_sqrt[row_of] * inv_sqrt[cols]).astype(np.float32)
    return NormalizedAdjacency(g.num_nodes, row_ptr, cols, weights,
                               self_loops_added=add_self_loops)


def permute(g: CsrGraph, perm) -> CsrGraph:
    """Relabel nodes: new index of node v is perm[v]."""
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (g.num_nodes,) or len(np.unique(perm)) != g.num_nodes \
            or perm.min() < 0 or perm.max() >= g.num_nodes:
        raise NotABijection("perm is not a bijection on node indices")
    deg = g.degrees()
    rows = np.repeat(perm, deg)
    cols = perm[g.col_idx]
    order = np.lexsort((cols, rows))
    rows, cols, w = rows[order], cols[order], g.edge_weight[order]
    row_ptr = np.zeros(g.num_nodes + 1, dtype=np.int64)
    np.add.at(row_ptr, rows + 1, 1)
    row_ptr = np.cumsum(row_ptr)
    out = CsrGraph(g.num_nodes, row_ptr, cols, w)
    if isinstance(g, NormalizedAdjacency):
        out = NormalizedAdjacency(g.num_nodes, row_ptr, cols, w,
                                  self_loops_added=g.self_loops_added)
    return out


@dataclass
class SbmSpec:
    """Parameters for stochastic-block-model graph generation."""

    num_communities: int
    size_range: tuple  # (min, max) inclusive node counts per community
    p_intra: float
    p_extra: float
    feature_vocab: int
    seed: int
    mode: str = "cluster"      # "cluster" | "pattern"
    pattern_size: int = 20     # pattern mode: nodes in the planted sub-block

    def validate(self):
        if not (0 <= self.p_extra < self.p_intra <= 1):
            raise ValueError("need 0 <= p_extra < p_intra <= 1")
        if self.size_range[0] < 1 or self.size_range[0] > self.size_range[1]:
            raise ValueError("invalid size_range")
        if self.mode not in ("cluster", "pattern"):
            raise ValueError(f"unknown SBM mode {self.mode!r}")
        if self.num_communities < 1 or self.feature_vocab < 1:
            raise ValueError("num_communities and feature_vocab must be >= 1")


def _sbm_edges(block_sizes, p_intra, p_extra, rng):
    """Sample undirected SBM edges (u < v) for the given block sizes."""
    n = int(np.sum(block_sizes))
    comm = np.repeat(np.arange(len(block_sizes)), block_sizes)
    iu, ju = np.triu_indices(n, k=1)
    p = np.where(comm[iu] == comm[ju], p_intra, p_extra)
    keep = rng.random(len(p)) < p
    return list(zip(iu[keep].tolist(), ju[keep].tolist())), comm


def sbm_generate(spec: SbmSpec):
    """Generate one SBM graph.

    Returns (graph, features, labels) with one-hot features of width
    ``feature_vocab``.  Cluster mode labels nodes by community id and reveals
    one random seed node per community through its feature (value = label+1,
    all other nodes get feature value 0).  Pattern mode plants an extra
    sub-block and labels membership in it.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.size_range
    sizes = rng.integers(lo, hi + 1, size=spec.num_communities)

    if spec.mode == "pattern":
        sizes = np.concatenate([sizes, [spec.pattern_size]])
        edges, comm = _sbm_edges(sizes, spec.p_intra, spec.p_extra, rng)
        n = int(np.sum(sizes))
        labels = (comm == spec.num_communities).astype(np.int64)
        values = rng.integers(0, spec.feature_vocab, size=n)
        feat_dim = spec.feature_vocab
    else:
        edges, comm = _sbm_edges(sizes, spec.p_intra, spec.p_extra, rng)
        n = int(np.sum(sizes))
        labels = comm.astype(np.int64)
        # one revealed seed per community; everyone else gets value 0
        values = np.zeros(n, dtype=np.int64)
        for c in range(spec.num_communities):
            members = np.flatnonzero(comm == c)
            seed_node = members[rng.integers(0, len(members))]
            values[seed_node] = labels[seed_node] + 1
        feat_dim = spec.feature_vocab
    values = np.clip(values, 0, feat_dim - 1)
    features = np.zeros((n, feat_dim), dtype=np.float32)
    features[np.arange(n), values] = 1.0
    graph = build_csr(edges, n, symmetric=True)
    return graph, features, labels

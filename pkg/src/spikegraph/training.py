"""Full-graph BPTT training, evaluation, and measurement probes."""

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetBundle
from .errors import EmptyMask, NonFiniteLoss
from .graph import NormalizedAdjacency, sym_normalize
from .metrics import OpCounters, RunMetrics
from .models import (ModelSpec, init_params, loss_cross_entropy, model_forward)
from .tensor import AdamState, Tape, adam_step, backward

# reported when the spike-driven op count is zero (ratio would be infinite)
RATIO_CAP = 1e9


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 200
    seed: int = 0
    deterministic: bool = True
    trials: int = 1
    # minimum-lr floor with plateau halving; active only when lr_floor < lr
    lr_floor: float = 0.0
    lr_patience: int = 10
    log_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def _snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params, snap):
    for k, p in params.items():
        p.data = snap[k].copy()


def accuracy(logits: np.ndarray, labels: np.ndarray, mask) -> float:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise EmptyMask("accuracy needs a nonempty mask")
    pred = logits[mask].argmax(axis=1)
    return float((pred == labels[mask]).mean())


def evaluate(params, bundle: DatasetBundle, spec: ModelSpec, mask,
             adj: NormalizedAdjacency = None) -> float:
    if adj is None:
        adj = sym_normalize(bundle.graph, add_self_loops=True)
    logits = model_forward(bundle.features, bundle.graph, adj, spec, params,
                           training=False)
    return accuracy(logits.data, bundle.labels, mask)


def train(bundle: DatasetBundle, spec: ModelSpec, cfg: TrainConfig,
          params=None, optimizer=None, start_epoch=0, loss_trace=None,
          val_trace=None):
    """Train on one graph transductively; returns (best params, RunMetrics).

    The optional state arguments allow resuming from a checkpoint and are
    normally left at their defaults.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    adj = sym_normalize(bundle.graph, add_self_loops=True)
    if params is None:
        params = init_params(spec, bundle.features.shape[1],
                             bundle.num_classes, rng)
    if optimizer is None:
        optimizer = AdamState(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    train_mask = np.asarray(bundle.splits["train"], dtype=np.int64)
    val_mask = np.asarray(bundle.splits["val"], dtype=np.int64)
    test_mask = np.asarray(bundle.splits["test"], dtype=np.int64)

    metrics = RunMetrics()
    metrics.loss_trace = list(loss_trace or [])
    metrics.val_acc_trace = list(val_trace or [])
    best_val, best_snap = -1.0, _snapshot(params)
    plateau = 0
    best_val_loss = np.inf

    for epoch in range(start_epoch, cfg.epochs):
        for p in params.values():
            p.grad = None
        with Tape() as tape:
            logits = model_forward(bundle.features, bundle.graph, adj, spec,
                                   params, rng=rng, training=True)
            loss = loss_cross_entropy(logits, bundle.labels, train_mask)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NonFiniteLoss(
                    f"epoch {epoch}: loss {loss_val} (lr {optimizer.lr})")
            backward(tape, loss)
        adam_step(params, optimizer)
        metrics.loss_trace.append(loss_val)

        if val_mask.size:
            eval_logits = model_forward(bundle.features, bundle.graph, adj,
                                        spec, params, training=False)
            val_acc = accuracy(eval_logits.data, bundle.labels, val_mask)
            metrics.val_acc_trace.append(val_acc)
            if val_acc > best_val:
                best_val = val_acc
                best_snap = _snapshot(params)
            if cfg.lr_floor and cfg.lr_floor < optimizer.lr:
                val_loss = float(loss_cross_entropy(
                    eval_logits, bundle.labels, val_mask).data)
                if val_loss < best_val_loss - 1e-6:
                    best_val_loss = val_loss
                    plateau = 0
                else:
                    plateau += 1
                    if plateau >= cfg.lr_patience:
                        optimizer.lr = max(cfg.lr_floor, optimizer.lr / 2)
                        plateau = 0
        else:
            best_snap = _snapshot(params)
        if cfg.log_every and (epoch + 1) % cfg.log_every == 0:
            tail = f" val {metrics.val_acc_trace[-1]:.3f}" if val_mask.size else ""
            print(f"epoch {epoch + 1}/{cfg.epochs} loss {loss_val:.4f}{tail}")

    _restore(params, best_snap)
    if test_mask.size:
        metrics.test_acc = evaluate(params, bundle, spec, test_mask, adj)
    metrics.wall_time_s = time.perf_counter() - t0
    metrics.extra["best_val_acc"] = best_val
    return params, metrics


def epochs_to_reach(val_trace, target: float):
    """First 1-based epoch at which validation accuracy hits ``target``."""
    for i, acc in enumerate(val_trace):
        if acc >= target:
            return i + 1
    return None


# -------------------------------------------------------------------- probes

def probe_firing_rates(params, bundle, spec, adj=None):
    if adj is None:
        adj = sym_normalize(bundle.graph, add_self_loops=True)
    collect = {}
    model_forward(bundle.features, bundle.graph, adj, spec, params,
                  training=False, collect=collect)
    return collect["firing_rates"]


def dense_baseline_ops(spec: ModelSpec, num_nodes: int, in_dim: int,
                       num_classes: int) -> int:
    """Feature-transform multiply-adds of the equivalent dense network:
    N * C_in * C_out per layer, summed over layers."""
    total = 0
    prev = in_dim
    widths = list(spec.layer_widths)
    if spec.coding == "roc" and widths[-1] != num_classes:
        widths.append(num_classes)
    for w in widths:
        total += num_nodes * prev * w
        prev = w
    return total


def count_ops(params, bundle, spec, adj=None):
    """One deterministic forward pass; returns a dict with spike-driven
    transform ops, aggregation ops, the dense baseline, and the
    feature-transform compression ratio."""
    if adj is None:
        adj = sym_normalize(bundle.graph, add_self_loops=True)
    counters = OpCounters()
    model_forward(bundle.features, bundle.graph, adj, spec, params,
                  training=False, counters=counters)
    dense = dense_baseline_ops(spec, bundle.graph.num_nodes,
                               bundle.features.shape[1], bundle.num_classes)
    snn = counters.transform_adds + counters.transform_muls
    ratio = dense / snn if snn else RATIO_CAP
    return {"transform_adds": counters.transform_adds,
            "transform_muls": counters.transform_muls,
            "aggregate_adds": counters.aggregate_adds,
            "aggregate_muls": counters.aggregate_muls,
            "dense_baseline": dense,
            "compression_ratio": ratio}


def feature_variance_stats(params, bundle, spec, adj=None):
    """Per-layer global and local variance of rate-decoded features.

    Global: variance over every entry of the [N, C] rate matrix.  Local:
    variance across nodes computed per feature, then averaged over features.
    """
    if adj is None:
        adj = sym_normalize(bundle.graph, add_self_loops=True)
    collect = {}
    model_forward(bundle.features, bundle.graph, adj, spec, params,
                  training=False, collect=collect)
    stats = []
    for train_ in collect["spike_trains"]:
        rates = train_.mean(axis=0)
        stats.append({"global_var": float(rates.var()),
                      "local_var": float(rates.var(axis=0).mean())})
    return stats


def with_depth(base: ModelSpec, depth: int) -> ModelSpec:
    """Replicate the first hidden width out to ``depth`` layers."""
    spec = copy.deepcopy(base)
    hidden = spec.layer_widths[0]
    kind = spec.layer_kinds[0]
    spec.layer_widths = [hidden] * (depth - 1) + [spec.layer_widths[-1]]
    spec.layer_kinds = [kind] * depth
    return spec


def depth_sweep(base_spec: ModelSpec, depths, bundle, cfg: TrainConfig):
    """Train one model per depth; rows carry accuracy and variance stats."""
    rows = []
    for depth in depths:
        spec = with_depth(base_spec, depth)
        params, metrics = train(bundle, spec, cfg)
        var_stats = feature_variance_stats(params, bundle, spec)
        rows.append({"depth": depth,
                     "test_acc": metrics.test_acc,
                     "best_val_acc": metrics.extra["best_val_acc"],
                     "final_loss": metrics.loss_trace[-1],
                     "last_global_var": var_stats[-1]["global_var"],
                     "last_local_var": var_stats[-1]["local_var"]})
    return rows


# -------------------------------------------------- multi-graph (SBM) training

def train_graphs(bundles, spec: ModelSpec, cfg: TrainConfig, val_bundles=None):
    """Inductive node classification over a collection of small graphs.

    One Adam step per graph per epoch.  Validation accuracy is node-level
    over ``val_bundles`` when given.
    """
    rng = np.random.default_rng(cfg.seed)
    first = bundles[0]
    params = init_params(spec, first.features.shape[1], first.num_classes, rng)
    optimizer = AdamState(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    adjs = [sym_normalize(b.graph, add_self_loops=True) for b in bundles]
    metrics = RunMetrics()
    best_val, best_snap = -1.0, _snapshot(params)
    order = np.arange(len(bundles))
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        total = 0.0
        for i in order:
            b = bundles[i]
            for p in params.values():
                p.grad = None
            with Tape() as tape:
                logits = model_forward(b.features, b.graph, adjs[i], spec,
                                       params, rng=rng, training=True)
                loss = loss_cross_entropy(logits, b.labels,
                                          np.arange(b.graph.num_nodes))
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    raise NonFiniteLoss(f"epoch {epoch}, graph {i}: {loss_val}")
                backward(tape, loss)
            adam_step(params, optimizer)
            total += loss_val
        metrics.loss_trace.append(total / len(bundles))
        if val_bundles:
            acc = evaluate_graphs(params, val_bundles, spec)
            metrics.val_acc_trace.append(acc)
            if acc > best_val:
                best_val = acc
                best_snap = _snapshot(params)
        if cfg.log_every and (epoch + 1) % cfg.log_every == 0:
            tail = f" val {metrics.val_acc_trace[-1]:.3f}" if val_bundles else ""
            print(f"epoch {epoch + 1}/{cfg.epochs} "
                  f"loss {metrics.loss_trace[-1]:.4f}{tail}")
    if val_bundles:
        _restore(params, best_snap)
        metrics.extra["best_val_acc"] = best_val
    metrics.wall_time_s = time.perf_counter() - t0
    return params, metrics


def evaluate_graphs(params, bundles, spec) -> float:
    """Node-level accuracy pooled over a list of graphs."""
    correct = 0
    total = 0
    for b in bundles:
        adj = sym_normalize(b.graph, add_self_loops=True)
        logits = model_forward(b.features, b.graph, adj, spec, params,
                               training=False)
        pred = logits.data.argmax(axis=1)
        correct += int((pred == b.labels).sum())
        total += b.graph.num_nodes
    return correct / total


def majority_baseline(bundles) -> float:
    """Accuracy of always predicting the most common label in the pool."""
    labels = np.concatenate([b.labels for b in bundles])
    counts = np.bincount(labels)
    return float(counts.max() / labels.size)

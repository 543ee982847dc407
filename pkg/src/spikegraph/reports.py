"""Report writers: every probe lands as a CSV file plus a rendered figure.

All writers take an output directory, create it if needed, and return the
list of paths they wrote, so the CLI can print a manifest.
"""

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .graph import sym_normalize
from .models import model_forward


def _ensure(out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_run_summary(out_dir, summary: dict):
    out_dir = _ensure(out_dir)
    path = out_dir / "run_summary.json"
    path.write_text(json.dumps(summary, indent=1, sort_keys=True,
                               default=float))
    return [path]


def write_loss_report(out_dir, loss_trace, val_acc_trace=None):
    out_dir = _ensure(out_dir)
    rows = [(i + 1, loss,
             val_acc_trace[i] if val_acc_trace and i < len(val_acc_trace) else "")
            for i, loss in enumerate(loss_trace)]
    csv_path = _write_csv(out_dir / "training_trace.csv",
                          ["epoch", "loss", "val_acc"], rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(loss_trace) + 1), loss_trace, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if val_acc_trace:
        ax2 = ax.twinx()
        ax2.plot(range(1, len(val_acc_trace) + 1), val_acc_trace,
                 color="tab:orange", label="val acc")
        ax2.set_ylabel("validation accuracy")
    fig.tight_layout()
    fig_path = out_dir / "training_trace.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [csv_path, fig_path]


def write_firing_rate_report(out_dir, rates):
    out_dir = _ensure(out_dir)
    rows = [(i + 1, r) for i, r in enumerate(rates)]
    csv_path = _write_csv(out_dir / "firing_rates.csv", ["layer", "rate"], rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([f"L{i + 1}" for i in range(len(rates))], rates)
    ax.set_ylabel("mean firing rate")
    ax.set_ylim(0, max(0.3, max(rates) * 1.2 if rates else 0.3))
    fig.tight_layout()
    fig_path = out_dir / "firing_rates.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [csv_path, fig_path]


def write_ops_report(out_dir, ops: dict):
    out_dir = _ensure(out_dir)
    csv_path = _write_csv(out_dir / "op_counts.csv", ["metric", "value"],
                          sorted(ops.items()))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    dense = ops["dense_baseline"]
    snn = ops["transform_adds"] + ops["transform_muls"]
    ax.bar(["dense", "spiking"], [dense, max(snn, 1)], color=["gray", "tab:blue"])
    ax.set_yscale("log")
    ax.set_ylabel("feature-transform ops")
    ax.set_title(f"compression {ops['compression_ratio']:.2f}x")
    fig.tight_layout()
    fig_path = out_dir / "op_counts.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [csv_path, fig_path]


def write_weight_histogram(out_dir, params, bins=60):
    out_dir = _ensure(out_dir)
    weights = np.concatenate([p.data.ravel() for k, p in sorted(params.items())
                              if k.endswith(".w")])
    counts, edges = np.histogram(weights, bins=bins)
    rows = [(edges[i], edges[i + 1], int(counts[i])) for i in range(bins)]
    csv_path = _write_csv(out_dir / "weight_histogram.csv",
                          ["bin_left", "bin_right", "count"], rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.stairs(counts, edges, fill=True)
    ax.set_xlabel("synaptic weight")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig_path = out_dir / "weight_histogram.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [csv_path, fig_path]


def write_variance_report(out_dir, stats):
    out_dir = _ensure(out_dir)
    rows = [(i + 1, s["global_var"], s["local_var"])
            for i, s in enumerate(stats)]
    csv_path = _write_csv(out_dir / "feature_variance.csv",
                          ["layer", "global_var", "local_var"], rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    layers = [r[0] for r in rows]
    ax.plot(layers, [r[1] for r in rows], marker="o", label="global")
    ax.plot(layers, [r[2] for r in rows], marker="s", label="local")
    ax.set_xlabel("layer")
    ax.set_ylabel("variance")
    ax.legend()
    fig.tight_layout()
    fig_path = out_dir / "feature_variance.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [csv_path, fig_path]


def write_sweep_report(out_dir, rows, knob: str, name="sweep"):
    """Rows: list of dicts each containing `knob` and 'test_acc'."""
    out_dir = _ensure(out_dir)
    header = list(rows[0].keys())
    csv_path = _write_csv(out_dir / f"{name}.csv", header,
                          [[r[k] for k in header] for r in rows])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r[knob] for r in rows], [r["test_acc"] for r in rows], marker="o")
    ax.set_xlabel(knob)
    ax.set_ylabel("test accuracy")
    fig.tight_layout()
    fig_path = out_dir / f"{name}.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [csv_path, fig_path]


def export_embeddings(out_dir, params, bundle, spec):
    """Rate-decoded last-hidden-layer features per node, with labels, for
    external projection tools; plus a quick 2-component PCA scatter."""
    out_dir = _ensure(out_dir)
    adj = sym_normalize(bundle.graph, add_self_loops=True)
    collect = {}
    model_forward(bundle.features, bundle.graph, adj, spec, params,
                  training=False, collect=collect)
    emb = collect["spike_trains"][-1].mean(axis=0)
    header = ["node", "label"] + [f"f{i}" for i in range(emb.shape[1])]
    rows = [[i, int(bundle.labels[i])] + emb[i].tolist()
            for i in range(emb.shape[0])]
    csv_path = _write_csv(out_dir / "embeddings.csv", header, rows)

    centered = emb - emb.mean(axis=0)
    # PCA via SVD; fall back to zeros for rank-deficient embeddings
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    proj = u[:, :2] * s[:2] if s.size >= 2 else np.zeros((emb.shape[0], 2))
    fig, ax = plt.subplots(figsize=(5, 5))
    sc = ax.scatter(proj[:, 0], proj[:, 1], c=bundle.labels, cmap="tab10", s=12)
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    fig.colorbar(sc, ax=ax, label="class")
    fig.tight_layout()
    fig_path = out_dir / "embeddings.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [csv_path, fig_path]

"""Command-line entry point.

Subcommands: train, eval, analyze, generate-sbm, sweep, export-embeddings.
Configuration precedence is CLI flags over config file over built-in
per-dataset defaults.  Config files use a flat ``key=value`` grammar, one
pair per line, ``#`` comments allowed; keys match the long flag names with
dashes replaced by underscores.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import reports
from .data import (bundle_from_sbm, load_checkpoint, load_dataset,
                   save_checkpoint, save_dataset, standard_splits)
from .errors import MissingCheckpoint, MissingFile, SpikeGraphError
from .graph import SbmSpec, sbm_generate
from .models import ModelSpec
from .training import (TrainConfig, count_ops, depth_sweep, evaluate,
                       evaluate_graphs, feature_variance_stats,
                       majority_baseline, probe_firing_rates, train,
                       train_graphs)


class CliError(Exception):
    """Configuration problem; maps to exit code 2."""


GLOBAL_DEFAULTS = dict(
    model="gc-snn", widths="16", heads=8, coding="rate", stfn=True,
    residual=False, t=8, vth=0.25, kappa=1.0, nu=0.5, rho=1.0,
    encoding="repeat", lr=0.01, wd=5e-4, dropout=0.1, epochs=200,
    trials=1, seed=0, deterministic=True, jobs=1, lr_floor=0.0,
)

# per-dataset hyperparameter tables; the ga-snn overlay applies on top
DATASET_DEFAULTS = {
    "cora": dict(widths="400,16", lr=0.01, dropout=0.1, wd=5e-4, t=8,
                 epochs=200),
    "citeseer": dict(widths="400,16", lr=0.01, dropout=0.1, wd=5e-4, t=8,
                     epochs=200),
    "pubmed": dict(widths="400,16", lr=0.01, dropout=0.1, wd=5e-4, t=8,
                   epochs=200),
    "sbm-pattern": dict(widths="64,64", lr=0.001, lr_floor=1e-5, t=8,
                        epochs=1000, wd=0.0, dropout=0.0),
    "sbm-cluster": dict(widths="64,64", lr=0.001, lr_floor=1e-5, t=8,
                        epochs=1000, wd=0.0, dropout=0.0),
}
GASNN_OVERLAY = dict(widths="64", lr=0.005, dropout=0.6, heads=8)

_BOOL_KEYS = {"stfn", "residual", "deterministic"}
_INT_KEYS = {"heads", "t", "epochs", "trials", "seed", "jobs"}
_FLOAT_KEYS = {"vth", "kappa", "nu", "rho", "lr", "wd", "dropout", "lr_floor"}


def _coerce(key, value):
    if key in _BOOL_KEYS:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "on", "yes"):
            return True
        if str(value).lower() in ("0", "false", "off", "no"):
            return False
        raise CliError(f"{key}: expected a boolean, got {value!r}")
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    return value


def read_config_file(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in GLOBAL_DEFAULTS:
            raise CliError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(args) -> dict:
    cfg = dict(GLOBAL_DEFAULTS)
    dataset = getattr(args, "dataset", None)
    model_flag = getattr(args, "model", None)
    if dataset:
        name = Path(dataset).name.lower()
        if name in DATASET_DEFAULTS:
            cfg.update(DATASET_DEFAULTS[name])
            if (model_flag or cfg["model"]) == "ga-snn":
                cfg.update(GASNN_OVERLAY)
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config))
    for key in GLOBAL_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _coerce(key, value)
    if cfg["model"] not in ("gc-snn", "ga-snn"):
        raise CliError(f"unknown model {cfg['model']!r}")
    if cfg["coding"] not in ("rate", "roc"):
        raise CliError(f"unknown coding {cfg['coding']!r}")
    return cfg


def build_spec(cfg) -> ModelSpec:
    try:
        widths = [int(w) for w in str(cfg["widths"]).split(",") if w.strip()]
    except ValueError:
        raise CliError(f"bad widths {cfg['widths']!r}")
    if not widths:
        raise CliError("widths must list at least one layer")
    kind = "gattn" if cfg["model"] == "ga-snn" else "gconv"
    return ModelSpec(layer_kinds=[kind] * len(widths), layer_widths=widths,
                     residual=cfg["residual"], stfn=cfg["stfn"],
                     coding=cfg["coding"], t_len=cfg["t"], dropout=cfg["dropout"],
                     heads=cfg["heads"], v_th=cfg["vth"], kappa=cfg["kappa"],
                     surrogate_width=cfg["nu"], rho=cfg["rho"],
                     encoding=cfg["encoding"])


def train_config(cfg, seed=None) -> TrainConfig:
    return TrainConfig(lr=cfg["lr"], weight_decay=cfg["wd"],
                       epochs=cfg["epochs"],
                       seed=cfg["seed"] if seed is None else seed,
                       deterministic=cfg["deterministic"],
                       trials=cfg["trials"], lr_floor=cfg["lr_floor"])


def _dataset_dir(args) -> Path:
    if args.dataset is None:
        raise CliError("--dataset is required")
    direct = Path(args.dataset)
    if direct.is_dir():
        return direct
    root = getattr(args, "data_dir", None) or os.environ.get(
        "SPIKEGRAPH_DATA_DIR", ".")
    candidate = Path(root) / args.dataset
    if candidate.is_dir():
        return candidate
    raise MissingFile(f"dataset {args.dataset!r} not found (looked in "
                      f"{direct} and {candidate})")


def _is_collection(directory: Path) -> bool:
    return (directory / "collection.meta.json").exists()


def load_collection(directory: Path):
    """A multi-graph dataset: collection.meta.json plus one bundle per
    graph subdirectory, with a graph-level train/val/test split."""
    meta = json.loads((directory / "collection.meta.json").read_text())
    bundles = {name: load_dataset(directory / name) for name in meta["graphs"]}
    splits = {k: [bundles[name] for name in meta[f"{k}_graphs"]]
              for k in ("train", "val", "test")}
    return splits, meta


def _load_single(args, cfg):
    bundle = load_dataset(_dataset_dir(args))
    if np.asarray(bundle.splits["train"]).size == 0:
        bundle.splits = standard_splits(bundle, seed=cfg["seed"])
    return bundle


def _spec_meta(spec: ModelSpec) -> dict:
    return {k: getattr(spec, k) for k in (
        "layer_kinds", "layer_widths", "residual", "stfn", "coding", "t_len",
        "readout", "dropout", "heads", "v_th", "kappa", "surrogate_width",
        "rho", "roc_penalty", "attn_slope", "encoding")}


def _spec_from_meta(meta: dict) -> ModelSpec:
    return ModelSpec(**meta)


# ---------------------------------------------------------------- subcommands

def cmd_train(args):
    cfg = resolve_config(args)
    spec = build_spec(cfg)
    out_dir = Path(args.out or "runs")
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_dir = _dataset_dir(args)

    if _is_collection(dataset_dir):
        splits, meta = load_collection(dataset_dir)
        params, metrics = train_graphs(splits["train"], spec,
                                       train_config(cfg),
                                       val_bundles=splits["val"])
        test_acc = evaluate_graphs(params, splits["test"], spec)
        save_checkpoint(out_dir / "checkpoint.bin", params,
                        meta={"spec": _spec_meta(spec), "dataset": args.dataset})
        reports.write_loss_report(out_dir, metrics.loss_trace,
                                  metrics.val_acc_trace)
        summary = {"dataset": args.dataset, "model": cfg["model"],
                   "seed": cfg["seed"], "test_acc": test_acc,
                   "majority_baseline": majority_baseline(splits["test"]),
                   "wall_time_s": metrics.wall_time_s}
        reports.write_run_summary(out_dir, summary)
        print(f"test accuracy {test_acc:.4f} "
              f"(majority baseline {summary['majority_baseline']:.4f})")
        return 0

    bundle = _load_single(args, cfg)

    def run_trial(i):
        return train(bundle, spec, train_config(cfg, seed=cfg["seed"] + i))

    trials = cfg["trials"]
    if cfg["jobs"] > 1 and trials > 1:
        with ThreadPoolExecutor(max_workers=cfg["jobs"]) as pool:
            results = list(pool.map(run_trial, range(trials)))
    else:
        results = [run_trial(i) for i in range(trials)]

    accs = []
    for i, (params, metrics) in enumerate(results):
        trial_dir = _prep(out_dir / f"trial_{i:02d}")
        save_checkpoint(trial_dir / "checkpoint.bin", params,
                        meta={"spec": _spec_meta(spec),
                              "dataset": args.dataset, "seed": cfg["seed"] + i})
        reports.write_loss_report(trial_dir, metrics.loss_trace,
                                  metrics.val_acc_trace)
        rates = probe_firing_rates(params, bundle, spec)
        summary = {"dataset": args.dataset, "model": cfg["model"],
                   "seed": cfg["seed"] + i, "test_acc": metrics.test_acc,
                   "firing_rates": rates,
                   "wall_time_s": metrics.wall_time_s}
        reports.write_run_summary(trial_dir, summary)
        accs.append(metrics.test_acc)

    mean = float(np.mean(accs))
    sd = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    reports.write_run_summary(out_dir, {
        "dataset": args.dataset, "model": cfg["model"], "trials": trials,
        "test_acc_mean": mean, "test_acc_sd": sd, "test_accs": accs})
    print(f"test accuracy {mean:.4f} +/- {sd:.4f} over {trials} trial(s)")
    return 0


def _prep(directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _load_trained(args):
    if not args.checkpoint or not Path(args.checkpoint).exists():
        raise MissingCheckpoint(str(args.checkpoint))
    params, _, _, meta = load_checkpoint(args.checkpoint)
    return params, _spec_from_meta(meta["spec"])


def cmd_eval(args):
    cfg = resolve_config(args)
    params, spec = _load_trained(args)
    dataset_dir = _dataset_dir(args)
    if _is_collection(dataset_dir):
        splits, _ = load_collection(dataset_dir)
        acc = evaluate_graphs(params, splits["test"], spec)
    else:
        bundle = _load_single(args, cfg)
        acc = evaluate(params, bundle, spec, bundle.splits["test"])
    print(f"test accuracy {acc:.4f}")
    return 0


def cmd_analyze(args):
    cfg = resolve_config(args)
    params, spec = _load_trained(args)
    bundle = _load_single(args, cfg)
    out_dir = Path(args.out or "analysis")
    written = []
    written += reports.write_firing_rate_report(
        out_dir, probe_firing_rates(params, bundle, spec))
    written += reports.write_ops_report(out_dir,
                                        count_ops(params, bundle, spec))
    written += reports.write_weight_histogram(out_dir, params)
    written += reports.write_variance_report(
        out_dir, feature_variance_stats(params, bundle, spec))
    written += reports.export_embeddings(out_dir, params, bundle, spec)
    for path in written:
        print(path)
    return 0


SBM_PRESETS = {
    "pattern": dict(num_communities=5, size_range=(5, 35), p_intra=0.5,
                    p_extra=0.35, feature_vocab=3),
    "cluster": dict(num_communities=6, size_range=(5, 35), p_intra=0.55,
                    p_extra=0.25, feature_vocab=7),
}


def cmd_generate_sbm(args):
    preset = dict(SBM_PRESETS[args.mode])
    if args.communities:
        preset["num_communities"] = args.communities
    if args.size_min or args.size_max:
        preset["size_range"] = (args.size_min or preset["size_range"][0],
                                args.size_max or preset["size_range"][1])
    if args.p_intra is not None:
        preset["p_intra"] = args.p_intra
    if args.p_extra is not None:
        preset["p_extra"] = args.p_extra
    if args.vocab:
        preset["feature_vocab"] = args.vocab
    out_dir = _prep(Path(args.out))
    names = []
    classes = 2 if args.mode == "pattern" else preset["num_communities"]
    for i in range(args.count):
        spec = SbmSpec(seed=args.seed + i, mode=args.mode, **preset)
        g, x, y = sbm_generate(spec)
        name = f"graph_{i:05d}"
        save_dataset(bundle_from_sbm(g, x, y, name, classes),
                     out_dir / name)
        names.append(name)
    n_train = int(args.count * 0.7)
    n_val = int(args.count * 0.15)
    meta = {"mode": args.mode, "num_classes": classes, "graphs": names,
            "train_graphs": names[:n_train],
            "val_graphs": names[n_train:n_train + n_val],
            "test_graphs": names[n_train + n_val:],
            "generator": preset, "seed": args.seed}
    (out_dir / "collection.meta.json").write_text(
        json.dumps(meta, indent=1, sort_keys=True))
    print(f"wrote {args.count} graph(s) to {out_dir}")
    return 0


def cmd_sweep(args):
    cfg = resolve_config(args)
    base_spec = build_spec(cfg)
    bundle = _load_single(args, cfg)
    out_dir = _prep(Path(args.out or "sweep"))
    tcfg = train_config(cfg)
    if args.knob == "depth":
        depths = [int(d) for d in args.values.split(",")]
        rows = depth_sweep(base_spec, depths, bundle, tcfg)
        written = reports.write_sweep_report(out_dir, rows, "depth",
                                             name="depth_sweep")
    elif args.knob == "t":
        rows = []
        for t in (int(v) for v in args.values.split(",")):
            spec = build_spec({**cfg, "t": t})
            _, metrics = train(bundle, spec, tcfg)
            rows.append({"t": t, "test_acc": metrics.test_acc,
                         "best_val_acc": metrics.extra["best_val_acc"]})
        written = reports.write_sweep_report(out_dir, rows, "t",
                                             name="time_window_sweep")
    elif args.knob == "residual":
        rows = []
        for flag in (False, True):
            spec = build_spec({**cfg, "residual": flag})
            _, metrics = train(bundle, spec, tcfg)
            rows.append({"residual": int(flag), "test_acc": metrics.test_acc})
        written = reports.write_sweep_report(out_dir, rows, "residual",
                                             name="residual_ablation")
    else:
        raise CliError(f"unknown sweep knob {args.knob!r}")
    for path in written:
        print(path)
    return 0


def cmd_export_embeddings(args):
    cfg = resolve_config(args)
    params, spec = _load_trained(args)
    bundle = _load_single(args, cfg)
    for path in reports.export_embeddings(Path(args.out or "analysis"),
                                          params, bundle, spec):
        print(path)
    return 0


# --------------------------------------------------------------------- parser

def _add_common(p, with_model=True):
    p.add_argument("--dataset", help="dataset name or directory")
    p.add_argument("--data-dir", dest="data_dir",
                   help="dataset root (default: $SPIKEGRAPH_DATA_DIR or .)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", choices=["on", "off"])
    if with_model:
        p.add_argument("--model", choices=["gc-snn", "ga-snn"])
        p.add_argument("--widths", help="comma-separated layer widths")
        p.add_argument("--heads", type=int)
        p.add_argument("--coding", choices=["rate", "roc"])
        p.add_argument("--stfn", choices=["on", "off"])
        p.add_argument("--residual", choices=["on", "off"])
        p.add_argument("--t", type=int, help="time window length")
        p.add_argument("--vth", type=float, help="firing threshold")
        p.add_argument("--kappa", type=float, help="leakage factor")
        p.add_argument("--nu", type=float, help="surrogate window width")
        p.add_argument("--rho", type=float, help="normalization scale factor")
        p.add_argument("--encoding", choices=["repeat", "bernoulli"])
        p.add_argument("--lr", type=float)
        p.add_argument("--lr-floor", dest="lr_floor", type=float)
        p.add_argument("--wd", type=float, help="weight decay")
        p.add_argument("--dropout", type=float)
        p.add_argument("--epochs", type=int)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spikegraph",
        description="Spiking graph neural networks: training, analysis, and "
                    "synthetic benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model, one or more trials")
    _add_common(p)
    p.add_argument("--trials", type=int, help="number of seeds")
    p.add_argument("--jobs", type=int, help="parallel trial workers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze",
                       help="firing rates, op counts, weights, variances")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("generate-sbm",
                       help="write a synthetic graph collection")
    p.add_argument("--mode", choices=["pattern", "cluster"], required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--communities", type=int)
    p.add_argument("--size-min", dest="size_min", type=int)
    p.add_argument("--size-max", dest="size_max", type=int)
    p.add_argument("--p-intra", dest="p_intra", type=float)
    p.add_argument("--p-extra", dest="p_extra", type=float)
    p.add_argument("--vocab", type=int)
    p.set_defaults(func=cmd_generate_sbm)

    p = sub.add_parser("sweep", help="depth / time-window / residual sweeps")
    _add_common(p)
    p.add_argument("--knob", choices=["depth", "t", "residual"],
                   required=True)
    p.add_argument("--values", default="2,4,8,16",
                   help="comma-separated sweep values (depth and t knobs)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings",
                       help="write per-node embeddings for projection")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SpikeGraphError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

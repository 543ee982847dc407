"""Dataset bundles, splits, and checkpoint persistence.

A dataset directory holds plain-text files plus an optional binary feature
blob:

    graph.meta.json   {"name", "num_classes", "feature_dim", "num_nodes"}
    edges.tsv         one undirected pair per line: "u<TAB>v"
    features.csv      one row per node, comma separated floats
    features.bin      alternative blob: 16-byte header (magic "SGFB",
                      version u32, rows u32, cols u32, little-endian)
                      followed by row-major float32 data
    labels.tsv        "node<TAB>label" per line
    split.json        {"train": [...], "val": [...], "test": [...]}
"""

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CorruptFile, InsufficientNodes, LabelOutOfRange,
                     MissingFile, SchemaViolation, VersionMismatch)
from .graph import CsrGraph, build_csr
from .tensor import AdamState, Tensor

SGFB_MAGIC = b"SGFB"
SGFB_VERSION = 1
CHECKPOINT_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1

# published statistics for the citation benchmarks; asserted at load time
KNOWN_DATASETS = {
    "cora": dict(num_nodes=2708, num_edges=5429, feature_dim=1433, num_classes=7),
    "citeseer": dict(num_nodes=3327, num_edges=4732, feature_dim=3703, num_classes=6),
    "pubmed": dict(num_nodes=19717, num_edges=44338, feature_dim=500, num_classes=3),
}


@dataclass
class DatasetBundle:
    graph: CsrGraph
    features: np.ndarray
    labels: np.ndarray
    splits: dict
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return int(self.meta["num_classes"])

    def validate(self):
        n = self.graph.num_nodes
        if self.features.shape[0] != n:
            raise SchemaViolation(
                f"feature rows {self.features.shape[0]} != num_nodes {n}")
        if self.labels.shape != (n,):
            raise SchemaViolation(f"labels shape {self.labels.shape}, want ({n},)")
        if self.labels.min(initial=0) < 0 or \
                self.labels.max(initial=0) >= self.num_classes:
            raise LabelOutOfRange(
                f"labels must lie in [0, {self.num_classes})")
        seen = set()
        for name in ("train", "val", "test"):
            idx = np.asarray(self.splits.get(name, []), dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise SchemaViolation(f"split '{name}' index out of range")
            overlap = seen.intersection(idx.tolist())
            if overlap:
                raise SchemaViolation(
                    f"split '{name}' overlaps earlier split at node {min(overlap)}")
            seen.update(idx.tolist())
        return self


def _require(directory: Path, name: str) -> Path:
    path = directory / name
    if not path.exists():
        raise MissingFile(str(path))
    return path


def _read_edges(path: Path):
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise SchemaViolation(
                    f"{path}:{lineno}: expected 'u<TAB>v', got {line!r}")
            try:
                edges.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise SchemaViolation(
                    f"{path}:{lineno}: non-integer node id in {line!r}")
    return edges


def _read_labels(path: Path, n: int):
    labels = np.full(n, -1, dtype=np.int64)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise SchemaViolation(
                    f"{path}:{lineno}: expected 'node<TAB>label'")
            try:
                node, lab = int(parts[0]), int(parts[1])
            except ValueError:
                raise SchemaViolation(f"{path}:{lineno}: non-integer field")
            if not 0 <= node < n:
                raise SchemaViolation(f"{path}:{lineno}: node {node} out of range")
            labels[node] = lab
    if np.any(labels < 0):
        missing = int(np.nonzero(labels < 0)[0][0])
        raise SchemaViolation(f"{path}: no label for node {missing}")
    return labels


def read_feature_blob(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != SGFB_MAGIC:
        raise SchemaViolation(f"{path}: bad feature blob header")
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version != SGFB_VERSION:
        raise VersionMismatch(
            f"{path}: blob version {version}, expected {SGFB_VERSION}")
    expected = 16 + rows * cols * 4
    if len(raw) != expected:
        raise SchemaViolation(
            f"{path}: {len(raw)} bytes, expected {expected} for {rows}x{cols}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(rows, cols).copy()


def write_feature_blob(path: Path, features: np.ndarray):
    rows, cols = features.shape
    with open(path, "wb") as fh:
        fh.write(SGFB_MAGIC)
        fh.write(struct.pack("<III", SGFB_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def load_dataset(directory) -> DatasetBundle:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFile(str(directory))
    meta = json.loads(_require(directory, "graph.meta.json").read_text())
    for key in ("name", "num_nodes", "num_classes", "feature_dim"):
        if key not in meta:
            raise SchemaViolation(f"graph.meta.json missing key {key!r}")
    n = int(meta["num_nodes"])

    edges = _read_edges(_require(directory, "edges.tsv"))
    # pairs are listed once; symmetrization happens in build_csr
    graph = build_csr(edges, n)

    bin_path = directory / "features.bin"
    if bin_path.exists():
        features = read_feature_blob(bin_path)
    else:
        csv_path = _require(directory, "features.csv")
        try:
            features = np.loadtxt(csv_path, delimiter=",", dtype=np.float32,
                                  ndmin=2)
        except ValueError as exc:
            raise SchemaViolation(f"{csv_path}: {exc}")
    if features.shape != (n, int(meta["feature_dim"])):
        raise SchemaViolation(
            f"features shape {features.shape}, meta says "
            f"({n}, {meta['feature_dim']})")

    labels = _read_labels(_require(directory, "labels.tsv"), n)
    if labels.max() >= int(meta["num_classes"]):
        raise LabelOutOfRange(
            f"label {int(labels.max())} >= num_classes {meta['num_classes']}")

    split_path = directory / "split.json"
    if split_path.exists():
        splits = {k: np.asarray(v, dtype=np.int64)
                  for k, v in json.loads(split_path.read_text()).items()}
    else:
        splits = {"train": np.array([], dtype=np.int64),
                  "val": np.array([], dtype=np.int64),
                  "test": np.array([], dtype=np.int64)}

    bundle = DatasetBundle(graph, features, labels, splits, dict(meta)).validate()

    known = KNOWN_DATASETS.get(str(meta["name"]).lower())
    if known is not None:
        stats = dict(num_nodes=graph.num_nodes,
                     num_edges=graph.col_idx.size // 2,
                     feature_dim=features.shape[1],
                     num_classes=bundle.num_classes)
        for key, want in known.items():
            if stats[key] != want:
                raise SchemaViolation(
                    f"{meta['name']}: {key}={stats[key]}, published value {want}")
    return bundle


def save_dataset(bundle: DatasetBundle, directory, binary_features=True):
    """Write a bundle back out in the canonical directory layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "graph.meta.json").write_text(
        json.dumps(bundle.meta, indent=1, sort_keys=True))
    g = bundle.graph
    with open(directory / "edges.tsv", "w") as fh:
        for u in range(g.num_nodes):
            for v in g.neighbors(u):
                if u < v:  # each undirected pair once
                    fh.write(f"{u}\t{v}\n")
    if binary_features:
        write_feature_blob(directory / "features.bin", bundle.features)
    else:
        np.savetxt(directory / "features.csv", bundle.features,
                   delimiter=",", fmt="%.8g")
    with open(directory / "labels.tsv", "w") as fh:
        for node, lab in enumerate(bundle.labels):
            fh.write(f"{node}\t{int(lab)}\n")
    (directory / "split.json").write_text(json.dumps(
        {k: np.asarray(v).tolist() for k, v in bundle.splits.items()}))
    return directory


def standard_splits(bundle: DatasetBundle, labels_per_class=20, val=500,
                    test=1000, seed=0):
    """Seeded Planetoid-style split: fixed labels per class, then val/test
    drawn from the remaining nodes."""
    if labels_per_class < 1:
        raise InsufficientNodes("labels_per_class must be >= 1")
    r = np.random.default_rng(seed)
    n = bundle.graph.num_nodes
    train = []
    for c in range(bundle.num_classes):
        pool = np.nonzero(bundle.labels == c)[0]
        if pool.size < labels_per_class:
            raise InsufficientNodes(
                f"class {c} has {pool.size} nodes, need {labels_per_class}")
        train.append(r.choice(pool, labels_per_class, replace=False))
    train = np.sort(np.concatenate(train))
    rest = np.setdiff1d(np.arange(n), train)
    if rest.size < val + test:
        raise InsufficientNodes(
            f"{rest.size} nodes left for val+test, need {val + test}")
    rest = r.permutation(rest)
    return {"train": train,
            "val": np.sort(rest[:val]),
            "test": np.sort(rest[val:val + test])}


# ------------------------------------------------------------- checkpointing

def _rng_state_to_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def _rng_state_from_json(text: str) -> np.random.Generator:
    state = json.loads(text)
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def save_checkpoint(path, params: dict, optimizer: AdamState = None,
                    rng: np.random.Generator = None, meta: dict = None):
    """Single-file checkpoint: magic, version, npz payload, sha256 trailer."""
    arrays = {f"param/{k}": p.data for k, p in params.items()}
    manifest = {"params": sorted(params), "meta": meta or {}}
    if optimizer is not None:
        manifest["optimizer"] = {
            "lr": optimizer.lr, "beta1": optimizer.beta1,
            "beta2": optimizer.beta2, "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
            "step_count": optimizer.step_count}
        for k in params:
            arrays[f"adam_m/{k}"] = optimizer.m[k]
            arrays[f"adam_v/{k}"] = optimizer.v[k]
    if rng is not None:
        manifest["rng"] = _rng_state_to_json(rng)
    buf = io.BytesIO()
    np.savez(buf, __manifest__=np.frombuffer(
        json.dumps(manifest).encode(), dtype=np.uint8), **arrays)
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(payload)))
        fh.write(payload)
        fh.write(hashlib.sha256(payload).digest())
    return path


def load_checkpoint(path):
    """Returns (params, optimizer or None, rng or None, meta)."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint file")
    version, size = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    payload = raw[16:16 + size]
    digest = raw[16 + size:16 + size + 32]
    if len(payload) != size or \
            hashlib.sha256(payload).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch")
    with np.load(io.BytesIO(payload)) as npz:
        manifest = json.loads(bytes(npz["__manifest__"]).decode())
        params = {k: Tensor(npz[f"param/{k}"].copy(), requires_grad=True)
                  for k in manifest["params"]}
        optimizer = None
        if "optimizer" in manifest:
            opt_meta = manifest["optimizer"]
            optimizer = AdamState(params, lr=opt_meta["lr"],
                                  beta1=opt_meta["beta1"],
                                  beta2=opt_meta["beta2"], eps=opt_meta["eps"],
                                  weight_decay=opt_meta["weight_decay"])
            optimizer.step_count = opt_meta["step_count"]
            for k in manifest["params"]:
                optimizer.m[k] = npz[f"adam_m/{k}"].copy()
                optimizer.v[k] = npz[f"adam_v/{k}"].copy()
        rng = _rng_state_from_json(manifest["rng"]) if "rng" in manifest else None
    return params, optimizer, rng, manifest["meta"]


def bundle_from_sbm(graph, features, labels, name, num_classes, splits=None):
    meta = dict(name=name, num_nodes=graph.num_nodes,
                num_classes=int(num_classes),
                feature_dim=int(features.shape[1]))
    if splits is None:
        splits = {"train": np.array([], dtype=np.int64),
                  "val": np.array([], dtype=np.int64),
                  "test": np.array([], dtype=np.int64)}
    return DatasetBundle(graph, np.asarray(features, dtype=np.float32),
                         np.asarray(labels, dtype=np.int64), splits, meta)

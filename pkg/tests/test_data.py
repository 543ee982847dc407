import json

import numpy as np
import pytest

from spikegraph.data import (DatasetBundle, bundle_from_sbm, load_checkpoint,
                             load_dataset, read_feature_blob, save_checkpoint,
                             save_dataset, standard_splits, write_feature_blob)
from spikegraph.errors import (CorruptFile, InsufficientNodes, LabelOutOfRange,
                               MissingFile, SchemaViolation, VersionMismatch)
from spikegraph.graph import SbmSpec, build_csr, sbm_generate
from spikegraph.tensor import AdamState, Tensor


def toy_bundle(n=6, classes=3, dim=4, seed=0):
    r = np.random.default_rng(seed)
    edges = [(i, (i + 1) % n) for i in range(n - 1)]
    g = build_csr(edges, n)
    feats = (r.random((n, dim)) < 0.5).astype(np.float32)
    labels = r.integers(0, classes, n)
    splits = {"train": np.array([0, 1]), "val": np.array([2, 3]),
              "test": np.array([4, 5])}
    meta = dict(name="toy", num_nodes=n, num_classes=classes, feature_dim=dim)
    return DatasetBundle(g, feats, labels, splits, meta)


def write_bundle(tmp_path, bundle, binary=False):
    return save_dataset(bundle, tmp_path / "ds", binary_features=binary)


# ------------------------------------------------------------------- loading

@pytest.mark.parametrize("binary", [False, True])
def test_round_trip(tmp_path, binary):
    b = toy_bundle()
    d = write_bundle(tmp_path, b, binary)
    b2 = load_dataset(d)
    assert b2.graph.num_nodes == b.graph.num_nodes
    assert np.array_equal(b2.graph.col_idx, b.graph.col_idx)
    assert np.array_equal(b2.features, b.features)
    assert np.array_equal(b2.labels, b.labels)
    for k in ("train", "val", "test"):
        assert np.array_equal(b2.splits[k], b.splits[k])
    # export-reload of the reloaded bundle is identical too
    d2 = save_dataset(b2, tmp_path / "ds2", binary_features=binary)
    b3 = load_dataset(d2)
    assert np.array_equal(b3.features, b2.features)


def test_missing_directory_and_files(tmp_path):
    with pytest.raises(MissingFile):
        load_dataset(tmp_path / "nope")
    d = write_bundle(tmp_path, toy_bundle())
    (d / "labels.tsv").unlink()
    with pytest.raises(MissingFile):
        load_dataset(d)


def test_truncated_edges_names_line(tmp_path):
    d = write_bundle(tmp_path, toy_bundle())
    with open(d / "edges.tsv", "a") as fh:
        fh.write("3\n")
    with pytest.raises(SchemaViolation) as err:
        load_dataset(d)
    assert "edges.tsv:6" in str(err.value)


def test_non_integer_edge(tmp_path):
    d = write_bundle(tmp_path, toy_bundle())
    (d / "edges.tsv").write_text("0\tx\n")
    with pytest.raises(SchemaViolation):
        load_dataset(d)


def test_label_out_of_range(tmp_path):
    d = write_bundle(tmp_path, toy_bundle())
    lines = (d / "labels.tsv").read_text().splitlines()
    lines[0] = "0\t99"
    (d / "labels.tsv").write_text("\n".join(lines) + "\n")
    with pytest.raises(LabelOutOfRange):
        load_dataset(d)


def test_missing_label_line(tmp_path):
    d = write_bundle(tmp_path, toy_bundle())
    lines = (d / "labels.tsv").read_text().splitlines()
    (d / "labels.tsv").write_text("\n".join(lines[1:]) + "\n")
    with pytest.raises(SchemaViolation):
        load_dataset(d)


def test_feature_shape_mismatch(tmp_path):
    d = write_bundle(tmp_path, toy_bundle())
    meta = json.loads((d / "graph.meta.json").read_text())
    meta["feature_dim"] = 99
    (d / "graph.meta.json").write_text(json.dumps(meta))
    with pytest.raises(SchemaViolation):
        load_dataset(d)


def test_overlapping_splits_rejected(tmp_path):
    d = write_bundle(tmp_path, toy_bundle())
    (d / "split.json").write_text(json.dumps(
        {"train": [0, 1], "val": [1], "test": []}))
    with pytest.raises(SchemaViolation):
        load_dataset(d)


def test_known_dataset_stats_enforced(tmp_path):
    b = toy_bundle()
    b.meta["name"] = "cora"  # wrong statistics for the published dataset
    d = write_bundle(tmp_path, b)
    with pytest.raises(SchemaViolation) as err:
        load_dataset(d)
    assert "published" in str(err.value)


# -------------------------------------------------------------- feature blob

def test_feature_blob_header_and_round_trip(tmp_path):
    x = np.random.default_rng(1).random((3, 5)).astype(np.float32)
    p = tmp_path / "f.bin"
    write_feature_blob(p, x)
    raw = p.read_bytes()
    assert raw[:4] == b"SGFB"
    assert len(raw) == 16 + 3 * 5 * 4
    assert np.array_equal(read_feature_blob(p), x)


def test_feature_blob_bad_magic_and_version(tmp_path):
    x = np.zeros((2, 2), dtype=np.float32)
    p = tmp_path / "f.bin"
    write_feature_blob(p, x)
    raw = bytearray(p.read_bytes())
    raw[0] = ord("X")
    p.write_bytes(bytes(raw))
    with pytest.raises(SchemaViolation):
        read_feature_blob(p)
    write_feature_blob(p, x)
    raw = bytearray(p.read_bytes())
    raw[4] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch):
        read_feature_blob(p)


# -------------------------------------------------------------------- splits

def test_standard_splits_counts_and_determinism():
    r = np.random.default_rng(2)
    n = 400
    g = build_csr([(i, i + 1) for i in range(n - 1)], n)
    labels = r.integers(0, 4, n)
    b = DatasetBundle(g, np.zeros((n, 2), dtype=np.float32), labels,
                      {}, dict(name="t", num_nodes=n, num_classes=4,
                               feature_dim=2))
    s = standard_splits(b, labels_per_class=20, val=100, test=150, seed=7)
    assert s["train"].size == 80
    assert s["val"].size == 100
    assert s["test"].size == 150
    all_idx = np.concatenate([s["train"], s["val"], s["test"]])
    assert np.unique(all_idx).size == all_idx.size
    for c in range(4):
        assert (labels[s["train"]] == c).sum() == 20
    s2 = standard_splits(b, labels_per_class=20, val=100, test=150, seed=7)
    for k in s:
        assert np.array_equal(s[k], s2[k])


def test_standard_splits_insufficient():
    b = toy_bundle()
    with pytest.raises(InsufficientNodes):
        standard_splits(b, labels_per_class=0)
    with pytest.raises(InsufficientNodes):
        standard_splits(b, labels_per_class=50, val=1, test=1)


# --------------------------------------------------------------- checkpoints

def make_params(seed=3):
    r = np.random.default_rng(seed)
    return {"w": Tensor(r.standard_normal((3, 4)).astype(np.float32),
                        requires_grad=True),
            "b": Tensor(r.standard_normal(4).astype(np.float32),
                        requires_grad=True)}


def test_checkpoint_round_trip(tmp_path):
    params = make_params()
    opt = AdamState(params, lr=0.005, weight_decay=5e-4)
    opt.step_count = 17
    opt.m["w"][:] = 0.25
    rng = np.random.default_rng(11)
    rng.random(5)
    p = tmp_path / "ck.bin"
    save_checkpoint(p, params, opt, rng, meta={"epoch": 3})
    params2, opt2, rng2, meta = load_checkpoint(p)
    assert meta == {"epoch": 3}
    for k in params:
        assert np.array_equal(params2[k].data, params[k].data)
        assert np.array_equal(opt2.m[k], opt.m[k])
        assert np.array_equal(opt2.v[k], opt.v[k])
    assert opt2.step_count == 17
    assert opt2.lr == 0.005
    # restored rng continues the same stream
    assert np.array_equal(rng2.random(4), rng.random(4))


def test_checkpoint_flipped_byte(tmp_path):
    p = tmp_path / "ck.bin"
    save_checkpoint(p, make_params())
    raw = bytearray(p.read_bytes())
    raw[60] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CorruptFile):
        load_checkpoint(p)


def test_checkpoint_version_and_missing(tmp_path):
    p = tmp_path / "ck.bin"
    save_checkpoint(p, make_params())
    raw = bytearray(p.read_bytes())
    raw[4] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch):
        load_checkpoint(p)
    with pytest.raises(MissingFile):
        load_checkpoint(tmp_path / "absent.bin")
    (tmp_path / "junk.bin").write_bytes(b"hello")
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "junk.bin")


# ------------------------------------------------------------------ sbm glue

def test_sbm_bundle_export_and_reload(tmp_path):
    spec = SbmSpec(num_communities=3, size_range=(4, 6), p_intra=0.6,
                   p_extra=0.1, feature_vocab=4, seed=5, mode="cluster")
    g, x, y = sbm_generate(spec)
    b = bundle_from_sbm(g, x, y, "sbm-toy", num_classes=3)
    d = save_dataset(b, tmp_path / "sbm")
    b2 = load_dataset(d)
    assert np.array_equal(b2.features, b.features)
    assert np.array_equal(b2.labels, b.labels)
    assert np.array_equal(b2.graph.row_ptr, b.graph.row_ptr)

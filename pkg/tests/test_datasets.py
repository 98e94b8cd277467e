import json

import numpy as np
import pytest

from ftsearch import datasets as ds
from ftsearch.graph import Graph


def write(tmp_path, lines, name="d.jsonl"):
    p = tmp_path / name
    p.write_text("".join((l if isinstance(l, str) else json.dumps(l)) + "\n" for l in lines))
    return p


def test_two_node_line_symmetrized(tmp_path):
    p = write(tmp_path, [{"nodes": [[0], [1]], "edges": [[0, 1, [2]]], "labels": [1]}])
    m, graphs = ds.load_jsonl(p)
    assert len(graphs) == 1 and graphs[0].edges.tolist() == [[0, 1], [1, 0]]
    assert graphs[0].edge_feats.tolist() == [[2], [2]]
    assert m.num_graphs == 1 and m.task_type == "classification"


def test_null_label_is_masked(tmp_path):
    p = write(tmp_path, [{"nodes": [[0]], "edges": [], "labels": [1, None]}])
    _, (g,) = ds.load_jsonl(p)
    assert g.label_mask.tolist() == [True, False]


def test_duplicate_reverse_edge_deduplicated(tmp_path):
    p = write(tmp_path, [{"nodes": [[0], [1]], "edges": [[0, 1, [3]], [1, 0, [3]]], "labels": [0]}])
    _, (g,) = ds.load_jsonl(p)
    assert len(g.edges) == 2


def test_duplicate_reverse_edge_conflict(tmp_path):
    p = write(tmp_path, [{"nodes": [[0], [1]], "edges": [[0, 1, [3]], [1, 0, [4]]], "labels": [0]}])
    with pytest.raises(ds.DatasetError, match="line 1"):
        ds.load_jsonl(p)


def test_malformed_line_reports_line_number(tmp_path):
    p = write(tmp_path, [{"nodes": [[0]], "labels": [1]}, "{not json"])
    with pytest.raises(ds.DatasetError, match="line 2"):
        ds.load_jsonl(p)


def test_inconsistent_arity(tmp_path):
    p = write(tmp_path, [{"nodes": [[0]], "labels": [1]}, {"nodes": [[0, 1]], "labels": [0]}])
    with pytest.raises(ds.DatasetError, match="line 2.*arity"):
        ds.load_jsonl(p)


def test_out_of_range_endpoint(tmp_path):
    p = write(tmp_path, [{"nodes": [[0], [1]], "edges": [[0, 7, [0]]], "labels": [1]}])
    with pytest.raises(ds.DatasetError, match="endpoint out of range"):
        ds.load_jsonl(p)


def test_loader_round_trip(tmp_path):
    _, graphs = ds.generate_synthetic("planted_fusion", 100, 3)
    p = tmp_path / "rt.jsonl"
    ds.write_jsonl(graphs, p)
    _, back = ds.load_jsonl(p)
    assert all(a.same_as(b) for a, b in zip(graphs, back))
    q = tmp_path / "rt2.jsonl"
    ds.write_jsonl(back, q)
    assert p.read_bytes() == q.read_bytes()


def test_manifest_sidecar_is_used(tmp_path):
    m, graphs = ds.generate_synthetic("planted_id_aug", 100, 0)
    p = tmp_path / "s.jsonl"
    ds.write_jsonl(graphs, p, m)
    assert (tmp_path / "s.manifest.json").exists()
    m2, _ = ds.load_jsonl(p)
    assert m2.planted == json.loads(json.dumps(m.planted))


def test_random_split_sizes():
    graphs = [Graph.build(1, [], [0], [], [1.0]) for _ in range(10)]
    tr, va, te = ds.split(graphs, "random", seed=0)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    assert sorted(tr + va + te) == list(range(10))
    assert ds.split(graphs, "random", seed=0) == (tr, va, te)


def test_by_key_greedy_assignment():
    keys = ["a"] * 8 + ["b", "c"]
    graphs = [Graph.build(1, [], [0], [], [1.0], split_key=k) for k in keys]
    tr, va, te = ds.split(graphs, "by_key")
    assert (tr, va, te) == (list(range(8)), [8], [9])


def test_by_key_never_straddles():
    _, graphs = ds.generate_synthetic("planted_readout", 300, 1)
    parts = ds.split(graphs, "by_key")
    keysets = [{graphs[i].split_key for i in idx} for idx in parts]
    assert not (keysets[0] & keysets[1] or keysets[0] & keysets[2] or keysets[1] & keysets[2])
    assert sum(map(len, parts)) == 300


def test_by_key_needs_keys():
    with pytest.raises(ds.DatasetError):
        ds.split([Graph.build(1, [], [0], [], [1.0])], "by_key")


def test_fractions_must_sum_to_one():
    with pytest.raises(ValueError):
        ds.split([], "random", fractions=(0.5, 0.2, 0.2))


@pytest.mark.parametrize("task", sorted(ds.PLANTED))
def test_generators_balanced_documented_deterministic(task):
    m, graphs = ds.generate_synthetic(task, 1000, 0)
    y = np.array([g.labels[0] for g in graphs])
    assert 0.45 <= y.mean() <= 0.55
    assert m.planted["dimension"] in ("fuse", "id_aug", "read")
    assert m.planted["oracle_evidence"]
    _, again = ds.generate_synthetic(task, 1000, 0)
    assert ds.dumps_jsonl(graphs) == ds.dumps_jsonl(again)


def test_readout_probe_oracle():
    m, _ = ds.generate_synthetic("planted_readout", 1000, 0)
    ev = m.planted["oracle_evidence"]
    assert ev["max_pooling_probe_auc"] > 0.9
    assert ev["mean_pooling_probe_auc"] < 0.7


def test_fusion_and_id_aug_oracles():
    ev = ds.generate_synthetic("planted_fusion", 1000, 0)[0].planted["oracle_evidence"]
    assert ev["one_hop_rule_accuracy"] == 1.0
    ev = ds.generate_synthetic("planted_id_aug", 1000, 0)[0].planted["oracle_evidence"]
    assert ev["own_feature_rule_accuracy"] == 1.0 and ev["neighbor_sum_probe_auc"] < 0.7


def test_generator_rejects_small_or_unknown():
    with pytest.raises(ValueError):
        ds.generate_synthetic("planted_fusion", 50)
    with pytest.raises(ValueError):
        ds.generate_synthetic("planted_nothing", 100)

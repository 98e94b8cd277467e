import numpy as np
import pytest

from ftsearch.graph import Graph, GraphError, batch, permute, unbatch, validate


def path_graph(n, feats=None, labels=(1.0,), key=None):
    pairs = []
    for v in range(1, n):
        pairs += [(v - 1, v), (v, v - 1)]
    feats = np.arange(n) % 3 if feats is None else feats
    return Graph.build(n, pairs, feats, [[0]] * len(pairs), labels, split_key=key)


def test_two_node_graph_valid():
    validate(Graph.build(2, [(0, 1), (1, 0)], [0, 1], [[0], [0]], [1.0]))


def test_endpoint_out_of_range():
    g = Graph.build(3, [(0, 5), (5, 0)], [0, 0, 0], [[0], [0]], [1.0])
    with pytest.raises(GraphError, match="endpoint out of range"):
        validate(g)


def test_missing_reverse_edge():
    g = Graph.build(2, [(0, 1)], [0, 0], [[0]], [1.0])
    with pytest.raises(GraphError, match="missing reverse edge"):
        validate(g)


def test_reverse_edge_features_must_agree():
    g = Graph.build(2, [(0, 1), (1, 0)], [0, 0], [[0], [1]], [1.0])
    with pytest.raises(GraphError, match="different features"):
        validate(g)


def test_nan_labels_are_masked():
    g = Graph.build(1, [], [0], [], [1.0, np.nan])
    assert g.label_mask.tolist() == [True, False]
    assert g.labels[1] == 0.0


def test_batch_of_one_is_identity():
    g = path_graph(4)
    b = batch([g])
    assert b.offsets.tolist() == [0]
    assert np.array_equal(b.node_feats, g.node_feats)
    assert np.array_equal(np.stack([b.src, b.dst], 1), g.edges)


def test_batch_offsets_and_graph_ids():
    b = batch([path_graph(2), path_graph(3)])
    assert b.num_nodes == 5
    assert b.graph_id.tolist() == [0, 0, 1, 1, 1]
    assert b.offsets.tolist() == [0, 2]
    assert b.src.min() >= 0 and b.src[2:].min() >= 2


def test_batch_arity_mismatch():
    g2 = Graph.build(2, [(0, 1), (1, 0)], [[0, 1], [1, 0]], [[0], [0]], [1.0])
    with pytest.raises(GraphError, match="arity"):
        batch([path_graph(2), g2])


def test_batch_task_count_mismatch():
    with pytest.raises(GraphError, match="task count"):
        batch([path_graph(2), path_graph(2, labels=(1.0, 0.0))])


def test_unbatch_round_trip():
    graphs = [path_graph(3, key="a"), Graph.build(1, [], [2], [], [0.0], split_key="b"), path_graph(5, labels=(np.nan,))]
    back = unbatch(batch(graphs))
    assert all(a.same_as(b) for a, b in zip(graphs, back))


def test_isolated_node_batches():
    b = batch([Graph.build(2, [], [0, 1], [], [1.0])])
    assert b.num_edges == 0 and b.edge_feats.shape == (0, 1)


def test_permute_relabels_consistently():
    g = path_graph(4, feats=[0, 1, 2, 0])
    perm = np.array([2, 0, 3, 1])
    p = permute(g, perm)
    validate(p)
    assert np.array_equal(p.node_feats[:, 0], g.node_feats[perm, 0])
    old_edges = {tuple(e) for e in g.edges.tolist()}
    new_edges = {(int(perm[u]), int(perm[v])) for u, v in p.edges}
    assert new_edges == old_edges

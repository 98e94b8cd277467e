import numpy as np
import pytest

from ftsearch import backbone as bb
from ftsearch import pretrain as pt
from ftsearch.graph import Graph


def cfg(kind="gin", vocab=4, d=16, K=2):
    return bb.BackboneConfig(conv_kind=kind, num_layers=K, hidden_dim=d,
                             node_feat_cardinalities=(vocab,), edge_feat_cardinalities=(1,))


def clique_or_empty(rng, n_graphs):
    graphs = []
    for i in range(n_graphs):
        n = int(rng.integers(4, 8))
        if i % 2 == 0:
            pairs = [(u, v) for u in range(n) for v in range(n) if u != v]
        else:
            pairs = []
        graphs.append(Graph.build(n, pairs, rng.integers(0, 4, n), [[0]] * len(pairs), [float(i % 2)]))
    return graphs


def copyable_graphs(rng, n_graphs, vocab=4):
    """Every node of a graph carries the same type, so a masked type can be read off the neighbors."""
    graphs = []
    for _ in range(n_graphs):
        n = int(rng.integers(5, 9))
        und = [(v - 1, v) for v in range(1, n)] + [(0, n - 1)]
        pairs = und + [(v, u) for u, v in und]
        t = int(rng.integers(0, vocab))
        graphs.append(Graph.build(n, pairs, [t] * n, [[0]] * len(pairs), [1.0]))
    return graphs


def test_param_count_matches_analytic():
    c = pt.fresh_checkpoint(cfg(), 0)
    assert c.num_params() == bb.count_params(c.config)


@pytest.mark.parametrize("kind", bb.CONV_KINDS)
def test_save_load_bit_exact(tmp_path, kind):
    c = pt.pretrain_edgepred(clique_or_empty(np.random.default_rng(0), 8), cfg(kind), seed=1, epochs=1)
    pt.save(c, tmp_path / "a.ckpt")
    back = pt.load(tmp_path / "a.ckpt")
    assert back.equals(c) and back.metadata == c.metadata
    pt.save(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_file_starts_with_magic(tmp_path):
    pt.save(pt.fresh_checkpoint(cfg(), 0), tmp_path / "c.ckpt")
    assert (tmp_path / "c.ckpt").read_bytes()[:8] == pt.MAGIC


def test_truncated_file_errors(tmp_path):
    p = tmp_path / "t.ckpt"
    pt.save(pt.fresh_checkpoint(cfg(), 0), p)
    raw = p.read_bytes()
    for cut in (4, 20, len(raw) - 8):
        p.write_bytes(raw[:cut])
        with pytest.raises(pt.CheckpointError):
            pt.load(p)


def test_version_mismatch_names_both(tmp_path):
    c = pt.fresh_checkpoint(cfg(), 0)
    c.format_version = 99
    pt.save(c, tmp_path / "v.ckpt")
    with pytest.raises(pt.CheckpointError, match=r"99.*1"):
        pt.load(tmp_path / "v.ckpt")


def test_conv_kind_mismatch(tmp_path):
    pt.save(pt.fresh_checkpoint(cfg("gin"), 0), tmp_path / "g.ckpt")
    with pytest.raises(pt.CheckpointError, match="descriptor mismatch"):
        pt.load(tmp_path / "g.ckpt", conv_kind="gcn")


def test_zero_epochs_is_initialization():
    graphs = clique_or_empty(np.random.default_rng(0), 6)
    for fn in (pt.pretrain_edgepred, pt.pretrain_attrmask):
        c = fn(graphs, cfg(), seed=3, epochs=0)
        assert c.equals(pt.fresh_checkpoint(cfg(), 3))


@pytest.mark.parametrize("fn", [pt.pretrain_edgepred, pt.pretrain_attrmask])
def test_same_seed_bit_identical(fn):
    graphs = clique_or_empty(np.random.default_rng(0), 10)
    assert fn(graphs, cfg(), seed=5, epochs=2).equals(fn(graphs, cfg(), seed=5, epochs=2))


def test_edgepred_needs_edges():
    with pytest.raises(ValueError, match="zero edges"):
        pt.pretrain_edgepred([Graph.build(3, [], [0, 1, 2], [], [1.0])], cfg())


def test_attrmask_needs_vocabulary():
    with pytest.raises(ValueError, match="nothing to predict"):
        pt.pretrain_attrmask(clique_or_empty(np.random.default_rng(0), 2), cfg(vocab=1))


def clique_plus_isolated(rng, n_graphs):
    """A clique component next to an edgeless component in every graph."""
    graphs = []
    for _ in range(n_graphs):
        c, e = int(rng.integers(3, 6)), int(rng.integers(3, 6))
        pairs = [(u, v) for u in range(c) for v in range(c) if u != v]
        graphs.append(Graph.build(c + e, pairs, rng.integers(0, 4, c + e), [[0]] * len(pairs), [1.0]))
    return graphs


def test_edgepred_scores_true_edges_higher():
    rng = np.random.default_rng(0)
    train, held = clique_plus_isolated(rng, 60), clique_plus_isolated(rng, 20)
    c = pt.pretrain_edgepred(train, cfg(), seed=0, epochs=15, lr=1e-2)
    from ftsearch.graph import batch

    b = batch(held)
    pos, neg = pt.edge_pairs(b, np.random.default_rng(1))
    h = bb.forward(b, c.config, c.params)[-1]
    assert pt.edge_scores(h, pos).data.mean() > pt.edge_scores(h, neg).data.mean()


def test_attrmask_beats_majority_and_loss_falls():
    rng = np.random.default_rng(0)
    train, held = copyable_graphs(rng, 150), copyable_graphs(rng, 50)
    hist = []
    c, dec = pt.pretrain_attrmask(train, cfg(), seed=0, epochs=12, lr=1e-2, history=hist, return_decoder=True)
    acc = pt.masked_token_accuracy(c, dec, held, 0.15, seed=1)
    types = np.concatenate([g.node_feats[:, 0] for g in held])
    majority = np.bincount(types).max() / len(types)
    assert acc > majority
    assert hist[-1] < hist[0]


def test_zero_mask_batch_contributes_no_loss():
    # so few nodes at such a low rate that no node gets masked: nothing trains
    graphs = [Graph.build(2, [(0, 1), (1, 0)], [0, 1], [[0], [0]], [1.0])]
    hist = []
    c = pt.pretrain_attrmask(graphs, cfg(), mask_rate=1e-9, seed=2, epochs=3, history=hist)
    assert hist == [0.0, 0.0, 0.0]
    assert c.equals(pt.fresh_checkpoint(cfg(), 2))


def test_mask_token_row_present():
    c = cfg(vocab=4)
    assert c.mask_token == 4
    assert bb.param_shapes(c)["node_emb.0"][0] == 5

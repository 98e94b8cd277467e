"""Finite-difference audits of whole models and of the controller path."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import search as se
from . import strategy as st
from .finetune import task_loss
from .graph import Graph, batch
from .pretrain import fresh_checkpoint


def tiny_graphs(rng, n_graphs=3, n_nodes=4, node_card=(5, 3), edge_card=(4, 2), num_tasks=2):
    """Small random connected graphs with distinct-ish features (4 nodes each)."""
    graphs = []
    for _ in range(n_graphs):
        und = [(v - 1, v) for v in range(1, n_nodes)] + [(0, n_nodes - 1)]
        pairs, feats = [], []
        for u, v in und:
            f = [int(rng.integers(0, c)) for c in edge_card]
            pairs += [(u, v), (v, u)]
            feats += [f, f]
        nodes = np.stack([rng.integers(0, c, n_nodes) for c in node_card], axis=1)
        labels = rng.integers(0, 2, num_tasks).astype(float)
        graphs.append(Graph.build(n_nodes, pairs, nodes, feats, labels))
    return graphs


def tiny_config(conv_kind, num_layers=2, hidden_dim=8):
    return bb.BackboneConfig(
        conv_kind=conv_kind,
        num_layers=num_layers,
        hidden_dim=hidden_dim,
        node_feat_cardinalities=(5, 3),
        edge_feat_cardinalities=(4, 2),
        learn_epsilon=conv_kind == "gin",
        dropout_rate=0.0,
    )


def smoke_grid(num_layers=2):
    """Choices covering every id_aug, fuse and read candidate at least once."""
    n = max(len(st.O_ID), len(st.O_FUSE), len(st.O_READ))
    out = []
    for i in range(n):
        ids = tuple(st.O_ID[(i + k) % len(st.O_ID)] for k in range(num_layers))
        out.append(st.StrategyChoice(ids, st.O_FUSE[i % len(st.O_FUSE)], st.O_READ[i % len(st.O_READ)]))
    return out


def _perturb(params, rng, scale=0.3):
    # move zero-initialized tensors off zero so every path carries gradient
    for t in params.values():
        t.data = t.data + scale * rng.standard_normal(t.shape)


def model_grad_error(conv_kind, choice, seed=0, task_type="classification"):
    """Max relative error over every parameter tensor of an assembled model."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config(conv_kind, len(choice.id_aug))
    ckpt = fresh_checkpoint(cfg, seed)
    graphs = tiny_graphs(rng)
    model = st.assemble_model(ckpt, choice, graphs[0].num_tasks, rng)
    _perturb(model.params, rng)
    b = batch(graphs)
    worst = 0.0
    for p in model.params.values():
        worst = max(worst, ad.grad_check(lambda _: task_loss(model.forward(b), b, task_type), p))
    return worst


def controller_grad_error(conv_kind="gin", seed=0, tau=1.0):
    """Max relative error of d loss / d logits through gumbel_sample and mixed_forward
    (Gumbel noise held fixed)."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config(conv_kind)
    ckpt = fresh_checkpoint(cfg, seed)
    graphs = tiny_graphs(rng)
    net = se.Supernet(ckpt, graphs[0].num_tasks, rng)
    _perturb(net.params, rng)
    ctrl = se.Controller(cfg.num_layers)
    for a in ctrl.alpha.values():
        a.data = rng.standard_normal(a.shape)
    noise = {n: rng.uniform(0.05, 0.95, a.shape) for n, a in ctrl.alpha.items()}
    b = batch(graphs)
    for p in net.params.values():
        p.requires_grad = False

    def loss():
        soft = {n: se.gumbel_sample(a, tau, u=noise[n]) for n, a in ctrl.alpha.items()}
        return task_loss(net.forward(b, soft), b, "classification")

    return max(ad.grad_check(lambda _: loss(), a) for a in ctrl.alpha.values())


def run_gradcheck(conv_kind, seed=0):
    """Smoke grid for one conv kind plus the controller path; returns a dict report."""
    per_choice = []
    for choice in smoke_grid():
        per_choice.append({"choice": choice.to_dict(), "max_rel_error": model_grad_error(conv_kind, choice, seed)})
    ctrl = controller_grad_error(conv_kind, seed)
    worst = max([c["max_rel_error"] for c in per_choice] + [ctrl])
    return {"conv": conv_kind, "models": per_choice, "controller_max_rel_error": ctrl, "max_rel_error": worst}

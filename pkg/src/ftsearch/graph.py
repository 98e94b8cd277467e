"""Graph data model, validation and block-diagonal batching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """A graph with categorical node/edge features and masked multi-task labels.

    ``edges`` is an [E, 2] array of directed (src, dst) pairs; every pair is
    expected together with its reverse.
    """

    num_nodes: int
    edges: np.ndarray
    node_feats: np.ndarray
    edge_feats: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray
    split_key: str | None = None

    @classmethod
    def build(cls, num_nodes, edges, node_feats, edge_feats, labels, label_mask=None, split_key=None, edge_arity=1):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        node_feats = np.asarray(node_feats, dtype=np.int64)
        if node_feats.ndim == 1:
            node_feats = node_feats.reshape(-1, 1)
        edge_feats = np.asarray(edge_feats, dtype=np.int64)
        if len(edges) == 0:
            edge_feats = np.zeros((0, edge_arity), dtype=np.int64)
        elif edge_feats.ndim == 1:
            edge_feats = edge_feats.reshape(-1, 1)
        labels = np.asarray(labels, dtype=np.float64).reshape(-1)
        if label_mask is None:
            label_mask = ~np.isnan(labels)
        label_mask = np.asarray(label_mask, dtype=bool).reshape(-1)
        labels = np.where(label_mask, np.nan_to_num(labels), 0.0)
        return cls(int(num_nodes), edges, node_feats, edge_feats, labels, label_mask, split_key)

    @property
    def num_tasks(self):
        return len(self.labels)

    def same_as(self, other: "Graph") -> bool:
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.node_feats, other.node_feats)
            and np.array_equal(self.edge_feats, other.edge_feats)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.label_mask, other.label_mask)
            and self.split_key == other.split_key
        )


def validate(g: Graph, num_tasks: int | None = None) -> None:
    """Raise GraphError naming the first violated invariant."""
    n = g.num_nodes
    if n < 0:
        raise GraphError(f"negative node count {n}")
    if g.edges.ndim != 2 or g.edges.shape[1] != 2:
        raise GraphError(f"edges must have shape [E, 2], got {g.edges.shape}")
    for i, (u, v) in enumerate(g.edges):
        if not (0 <= u < n and 0 <= v < n):
            raise GraphError(f"edge {i} ({u},{v}): endpoint out of range for {n} nodes")
    if len(g.node_feats) != n:
        raise GraphError(f"node_feats has {len(g.node_feats)} rows for {n} nodes")
    if len(g.edge_feats) != len(g.edges):
        raise GraphError(f"edge_feats has {len(g.edge_feats)} rows for {len(g.edges)} edges")
    feats = {}
    for i, (u, v) in enumerate(g.edges):
        feats[(int(u), int(v))] = i
    for i, (u, v) in enumerate(g.edges):
        j = feats.get((int(v), int(u)))
        if j is None:
            raise GraphError(f"edge {i} ({u},{v}): missing reverse edge")
        if not np.array_equal(g.edge_feats[i], g.edge_feats[j]):
            raise GraphError(f"edge {i} ({u},{v}): reverse edge {j} has different features")
    if len(g.label_mask) != len(g.labels):
        raise GraphError(f"label mask length {len(g.label_mask)} != task count {len(g.labels)}")
    if num_tasks is not None and len(g.labels) != num_tasks:
        raise GraphError(f"graph has {len(g.labels)} tasks, dataset has {num_tasks}")


@dataclass(eq=False)
class GraphBatch:
    """Disjoint union of graphs; node ids of graph ``i`` are shifted by ``offsets[i]``."""

    num_nodes: int
    node_feats: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_feats: np.ndarray
    graph_id: np.ndarray
    offsets: np.ndarray
    edge_offsets: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray
    split_keys: list = field(default_factory=list)

    @property
    def num_graphs(self):
        return len(self.offsets)

    @property
    def num_edges(self):
        return len(self.src)

    def in_degree(self):
        return np.bincount(self.dst, minlength=self.num_nodes).astype(np.float64)


def batch(graphs: list[Graph]) -> GraphBatch:
    if not graphs:
        raise GraphError("cannot batch an empty list of graphs")
    fn, fe, nt = graphs[0].node_feats.shape[1], graphs[0].edge_feats.shape[1], graphs[0].num_tasks
    for i, g in enumerate(graphs):
        if g.node_feats.shape[1] != fn or g.edge_feats.shape[1] != fe:
            raise GraphError(f"graph {i}: feature arity mismatch")
        if g.num_tasks != nt:
            raise GraphError(f"graph {i}: task count {g.num_tasks} != {nt}")
    sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    esizes = np.array([len(g.edges) for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    eoffsets = np.concatenate([[0], np.cumsum(esizes)[:-1]]).astype(np.int64)
    edges = np.concatenate([g.edges + o for g, o in zip(graphs, offsets)]) if esizes.sum() else np.zeros((0, 2), np.int64)
    efeats = np.concatenate([g.edge_feats for g in graphs])
    return GraphBatch(
        num_nodes=int(sizes.sum()),
        node_feats=np.concatenate([g.node_feats for g in graphs]),
        src=edges[:, 0].copy(),
        dst=edges[:, 1].copy(),
        edge_feats=efeats,
        graph_id=np.repeat(np.arange(len(graphs)), sizes),
        offsets=offsets,
        edge_offsets=eoffsets,
        labels=np.stack([g.labels for g in graphs]),
        label_mask=np.stack([g.label_mask for g in graphs]),
        split_keys=[g.split_key for g in graphs],
    )


def unbatch(b: GraphBatch) -> list[Graph]:
    out = []
    ends = list(b.offsets[1:]) + [b.num_nodes]
    eends = list(b.edge_offsets[1:]) + [b.num_edges]
    for i, (o, e, eo, ee) in enumerate(zip(b.offsets, ends, b.edge_offsets, eends)):
        edges = np.stack([b.src[eo:ee], b.dst[eo:ee]], axis=1) - o
        out.append(
            Graph(
                num_nodes=int(e - o),
                edges=edges,
                node_feats=b.node_feats[o:e],
                edge_feats=b.edge_feats[eo:ee],
                labels=b.labels[i],
                label_mask=b.label_mask[i],
                split_key=b.split_keys[i] if b.split_keys else None,
            )
        )
    return out


def permute(g: Graph, perm) -> Graph:
    """Relabel nodes so that old node ``perm[i]`` becomes node ``i``."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return Graph(
        num_nodes=g.num_nodes,
        edges=inv[g.edges] if len(g.edges) else g.edges,
        node_feats=g.node_feats[perm],
        edge_feats=g.edge_feats,
        labels=g.labels,
        label_mask=g.label_mask,
        split_key=g.split_key,
    )

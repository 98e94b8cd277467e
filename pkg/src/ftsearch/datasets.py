"""JSON-lines graph datasets, deterministic splits and planted synthetic tasks.

Line schema::

    {"nodes": [[int, ...], ...],
     "edges": [[u, v, [int, ...]], ...],      # undirected, listed once
     "labels": [float | null, ...],
     "split_key": "optional"}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .finetune import roc_auc
from .graph import Graph, GraphError, validate


class DatasetError(ValueError):
    pass


@dataclass
class DatasetManifest:
    name: str
    task_type: str
    num_tasks: int
    node_feat_cardinalities: list
    edge_feat_cardinalities: list
    num_graphs: int
    source: str = ""
    generator: dict | None = None
    planted: dict | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def manifest_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name[: -len(p.suffix)] + ".manifest.json" if p.suffix else p.name + ".manifest.json")


# ---------------------------------------------------------------------------
# JSON lines


def _parse_line(obj, lineno):
    try:
        nodes = obj["nodes"]
        edges = obj.get("edges", [])
        labels = obj["labels"]
    except (KeyError, TypeError) as e:
        raise DatasetError(f"line {lineno}: missing field {e}") from None
    if not nodes or not all(isinstance(r, list) for r in nodes):
        raise DatasetError(f"line {lineno}: 'nodes' must be a non-empty list of lists")
    fn = len(nodes[0])
    if any(len(r) != fn for r in nodes):
        raise DatasetError(f"line {lineno}: inconsistent node feature arity")
    pairs, feats, seen = [], [], {}
    fe = None
    for e in edges:
        if not (isinstance(e, list) and len(e) == 3 and isinstance(e[2], list)):
            raise DatasetError(f"line {lineno}: edge entries must be [u, v, [feats]]")
        u, v, f = int(e[0]), int(e[1]), [int(x) for x in e[2]]
        if fe is None:
            fe = len(f)
        elif len(f) != fe:
            raise DatasetError(f"line {lineno}: inconsistent edge feature arity")
        key = (min(u, v), max(u, v))
        if key in seen:
            if seen[key] != f:
                raise DatasetError(f"line {lineno}: edge ({u},{v}) listed twice with different features")
            continue
        seen[key] = f
        pairs.append((u, v))
        feats.append(f)
        if u != v:
            pairs.append((v, u))
            feats.append(f)
    labels = [np.nan if x is None else float(x) for x in labels]
    return nodes, pairs, feats, fe, labels, obj.get("split_key")


def load_jsonl(path, name=None) -> tuple[DatasetManifest, list[Graph]]:
    path = Path(path)
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {lineno}: malformed JSON ({e.msg})") from None
            records.append((lineno, _parse_line(obj, lineno)))
    if not records:
        raise DatasetError(f"{path}: no graphs")
    side = manifest_path(path)
    declared = json.loads(side.read_text()) if side.exists() else None
    fn = len(records[0][1][0][0])
    fe = next((r[3] for _, r in records if r[3] is not None), None)
    if fe is None:
        fe = len(declared["edge_feat_cardinalities"]) if declared else 1
    nt = len(records[0][1][4])
    graphs = []
    for lineno, (nodes, pairs, feats, efe, labels, key) in records:
        if len(nodes[0]) != fn:
            raise DatasetError(f"line {lineno}: node feature arity {len(nodes[0])} != {fn}")
        if efe is not None and efe != fe:
            raise DatasetError(f"line {lineno}: edge feature arity {efe} != {fe}")
        if len(labels) != nt:
            raise DatasetError(f"line {lineno}: {len(labels)} labels, expected {nt}")
        g = Graph.build(len(nodes), pairs, nodes, feats, labels, split_key=key, edge_arity=fe)
        try:
            validate(g, nt)
        except GraphError as e:
            raise DatasetError(f"line {lineno}: {e}") from None
        graphs.append(g)
    node_card = np.max(np.concatenate([g.node_feats for g in graphs]), axis=0) + 1
    efs = [g.edge_feats for g in graphs if len(g.edge_feats)]
    edge_card = np.max(np.concatenate(efs), axis=0) + 1 if efs else np.ones(fe, dtype=int)
    if declared:
        manifest = DatasetManifest.from_dict(declared)
        if any(c < o for c, o in zip(manifest.node_feat_cardinalities, node_card)) or any(
            c < o for c, o in zip(manifest.edge_feat_cardinalities, edge_card)
        ):
            raise DatasetError(f"{side}: declared cardinalities do not cover the data")
        manifest.num_graphs = len(graphs)
    else:
        lab = np.stack([g.labels for g in graphs])[np.stack([g.label_mask for g in graphs])]
        task_type = "classification" if np.all(np.isin(lab, (0.0, 1.0))) else "regression"
        manifest = DatasetManifest(
            name=name or path.stem,
            task_type=task_type,
            num_tasks=nt,
            node_feat_cardinalities=[int(c) for c in node_card],
            edge_feat_cardinalities=[int(c) for c in edge_card],
            num_graphs=len(graphs),
            source=str(path),
        )
    return manifest, graphs


def graph_to_record(g: Graph) -> dict:
    edges, seen = [], set()
    for (u, v), f in zip(g.edges.tolist(), g.edge_feats.tolist()):
        key = (min(u, v), max(u, v))
        if key in seen:
            continue
        seen.add(key)
        edges.append([u, v, f])
    rec = {
        "nodes": g.node_feats.tolist(),
        "edges": edges,
        "labels": [float(y) if m else None for y, m in zip(g.labels.tolist(), g.label_mask.tolist())],
    }
    if g.split_key is not None:
        rec["split_key"] = g.split_key
    return rec


def dumps_jsonl(graphs) -> str:
    return "".join(json.dumps(graph_to_record(g), separators=(",", ":")) + "\n" for g in graphs)


def write_jsonl(graphs, path, manifest: DatasetManifest | None = None) -> None:
    Path(path).write_text(dumps_jsonl(graphs))
    if manifest is not None:
        manifest_path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# splits


def split(graphs, mode="random", fractions=(0.8, 0.1, 0.1), seed=0):
    """Return (train, val, test) index lists."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    n = len(graphs)
    n_train = int(np.floor(fractions[0] * n + 1e-9))
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    if mode == "random":
        order = np.random.default_rng(seed).permutation(n)
        return (
            sorted(order[:n_train].tolist()),
            sorted(order[n_train : n_train + n_val].tolist()),
            sorted(order[n_train + n_val :].tolist()),
        )
    if mode == "by_key":
        groups = {}
        for i, g in enumerate(graphs):
            if g.split_key is None:
                raise DatasetError(f"graph {i} has no split_key; by_key split needs one on every graph")
            groups.setdefault(g.split_key, []).append(i)
        ordered = sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[1][0]))
        train, val, test = [], [], []
        for _, idx in ordered:
            if len(train) + len(idx) <= n_train:
                train += idx
            elif len(val) + len(idx) <= n_val:
                val += idx
            else:
                test += idx
        return sorted(train), sorted(val), sorted(test)
    raise ValueError(f"unknown split mode {mode!r}")


def split_graphs(graphs, mode="random", fractions=(0.8, 0.1, 0.1), seed=0):
    """Like ``split`` but returns the graph lists themselves."""
    return tuple([graphs[i] for i in idx] for idx in split(graphs, mode, fractions, seed))


# ---------------------------------------------------------------------------
# planted synthetic tasks

PLANTED = {
    "planted_fusion": {"dimension": "fuse", "optimum": "any fusion other than last"},
    "planted_id_aug": {"dimension": "id_aug", "optimum": "identity_aug or trans_aug in some layer"},
    "planted_readout": {"dimension": "read", "optimum": "max_pooling or another non-mean readout"},
}


def _random_connected(n, extra, rng):
    """Random tree on ``n`` nodes plus ``extra`` random chords, as undirected pairs."""
    edges = set()
    for v in range(1, n):
        u = int(rng.integers(0, v))
        edges.add((u, v))
    for _ in range(extra):
        u, v = rng.integers(0, n, 2)
        if u != v:
            edges.add((int(min(u, v)), int(max(u, v))))
    return sorted(edges)


def _make_graph(n, und_edges, node_feats, label, key, edge_types=None):
    pairs, feats = [], []
    for i, (u, v) in enumerate(und_edges):
        f = [int(edge_types[i])] if edge_types is not None else [0]
        pairs += [(u, v), (v, u)]
        feats += [f, f]
    return Graph.build(n, pairs, node_feats, feats, [float(label)], split_key=key, edge_arity=1)


def _balanced_labels(n, rng):
    labels = np.zeros(n, dtype=int)
    labels[: n // 2] = 1
    return rng.permutation(labels)


def _gen_fusion(n_graphs, rng):
    """Label: does an edge join a type-0 node to a type-1 node?  Negatives put
    the two at distance exactly 2, so every representation that has looked
    two or more hops away sees both classes alike; only 1-hop features
    separate them.  The rest of the graph is filler with random types."""
    vocab = 16
    labels = _balanced_labels(n_graphs, rng)
    graphs = []
    for i, y in enumerate(labels):
        n = int(rng.integers(14, 26))
        und = _random_connected(n, n // 2, rng)
        types = rng.integers(2, vocab, n)
        adj = {v: set() for v in range(n)}
        for u, v in und:
            adj[u].add(v)
            adj[v].add(u)
        if y:
            u, v = und[int(rng.integers(0, len(und)))]
        else:
            pairs = [(a, c) for a in range(n) for c in range(a + 1, n) if c not in adj[a] and adj[a] & adj[c]]
            u, v = pairs[int(rng.integers(0, len(pairs)))]
        if rng.random() < 0.5:
            u, v = v, u
        types[u], types[v] = 0, 1
        graphs.append(_make_graph(n, und, types.reshape(-1, 1), y, f"k{i % 97}"))
    return graphs, [vocab], [1], _fusion_oracle(graphs)


def _fusion_oracle(graphs):
    """Accuracy of the 1-hop rule, and how often the two marked nodes share a
    2-hop neighborhood (their 2-hop views coincide in both classes)."""
    hits, shared = 0, 0
    for g in graphs:
        t = g.node_feats[:, 0]
        s, d = g.edges[:, 0], g.edges[:, 1]
        rule = bool(np.any((t[s] == 0) & (t[d] == 1)))
        hits += rule == bool(g.labels[0])
        a, b = int(np.flatnonzero(t == 0)[0]), int(np.flatnonzero(t == 1)[0])
        na, nb = set(d[s == a]), set(d[s == b])
        shared += bool(na & nb) or b in na
    return {"one_hop_rule_accuracy": hits / len(graphs), "within_two_hops_fraction": shared / len(graphs)}


def _gen_id_aug(n_graphs, rng):
    """Label: do type-0 nodes outnumber type-1 nodes (by 1 to 3)?

    Each type's total degree is drawn independently of the label and edges
    pair degree stubs uniformly at random, so neighbor types are shuffled
    noise: aggregated neighbor sums differ between the types by a
    label-independent amount much larger than the count gap.  A node's own
    feature, kept by an identity path, carries the label exactly."""
    labels = _balanced_labels(n_graphs, rng)
    graphs = []
    for i, y in enumerate(labels):
        n_minor = int(rng.integers(8, 14))
        n_major = n_minor + int(rng.integers(1, 4))
        na, nb = (n_major, n_minor) if y else (n_minor, n_major)
        cls = np.array([0] * na + [1] * nb)
        stubs = []
        for t in (0, 1):
            idx = np.flatnonzero(cls == t)
            total = int(rng.integers(24, 48))
            deg = 1 + rng.multinomial(total - len(idx), np.ones(len(idx)) / len(idx))
            stubs += np.repeat(idx, deg).tolist()
        stubs = rng.permutation(np.array(stubs))
        if len(stubs) % 2:
            stubs = stubs[:-1]
        und = sorted({(int(min(u, v)), int(max(u, v))) for u, v in stubs.reshape(-1, 2) if u != v})
        perm = rng.permutation(na + nb)
        inv = np.empty(na + nb, dtype=int)
        inv[perm] = np.arange(na + nb)
        und = sorted((int(min(inv[u], inv[v])), int(max(inv[u], inv[v]))) for u, v in und)
        graphs.append(_make_graph(na + nb, und, cls[perm].reshape(-1, 1), y, f"k{i % 97}"))
    return graphs, [2], [1], _id_aug_oracle(graphs)


def _id_aug_oracle(graphs):
    """Own-feature counting rule vs a linear probe on neighbor-only aggregates."""
    y = np.array([g.labels[0] for g in graphs])
    own = np.array([np.sum(g.node_feats[:, 0] == 0) > np.sum(g.node_feats[:, 0] == 1) for g in graphs])
    neigh = []
    for g in graphs:
        onehot = np.eye(2)[g.node_feats[:, 0]]
        agg = np.zeros_like(onehot)
        np.add.at(agg, g.edges[:, 1], onehot[g.edges[:, 0]])
        neigh.append(agg.sum(axis=0))
    return {
        "own_feature_rule_accuracy": float(np.mean(own == y)),
        "neighbor_sum_probe_auc": float(_probe_auc(np.array(neigh), y)),
    }


READOUT_SIZES = (10, 50)
READOUT_CHORDS = 0


def _gen_readout(n_graphs, rng):
    """Label: does the graph contain a node at the top intensity level 9?
    Every graph draws its other intensities from a graph-specific range, so
    averages carry little signal while maxima carry all of it."""
    labels = _balanced_labels(n_graphs, rng)
    graphs = []
    for i, y in enumerate(labels):
        n = int(rng.integers(*READOUT_SIZES))
        cap = int(rng.integers(1, 9))
        inten = rng.integers(0, cap + 1, n)
        if y:
            inten[int(rng.integers(0, n))] = 9
        und = _random_connected(n, READOUT_CHORDS, rng)
        graphs.append(_make_graph(n, und, inten.reshape(-1, 1), y, f"k{i % 97}"))
    probe = _readout_probe(graphs)
    return graphs, [10], [1], probe


def _probe_auc(x, y):
    xb = np.column_stack([x, np.ones(len(x))])
    w, *_ = np.linalg.lstsq(xb, y, rcond=None)
    return roc_auc(xb @ w, y)[0]


def _readout_probe(graphs):
    """Linear probes on max- and mean-pooled raw embeddings (intensity / 9)."""
    y = np.array([g.labels[0] for g in graphs])
    raw = [g.node_feats[:, 0] / 9.0 for g in graphs]
    mx = np.array([r.max() for r in raw])
    mn = np.array([r.mean() for r in raw])
    return {"max_pooling_probe_auc": _probe_auc(mx, y), "mean_pooling_probe_auc": _probe_auc(mn, y)}


_GENERATORS = {"planted_fusion": _gen_fusion, "planted_id_aug": _gen_id_aug, "planted_readout": _gen_readout}


def generate_synthetic(task, n_graphs=1000, seed=0):
    """Return (manifest, graphs) for a planted task."""
    if task not in _GENERATORS:
        raise ValueError(f"unknown synthetic task {task!r}; expected one of {sorted(_GENERATORS)}")
    if n_graphs < 100:
        raise ValueError("synthetic generators need n_graphs >= 100")
    rng = np.random.default_rng(seed)
    graphs, ncard, ecard, evidence = _GENERATORS[task](n_graphs, rng)
    y = np.array([g.labels[0] for g in graphs])
    evidence = dict(evidence, positive_fraction=float(y.mean()))
    manifest = DatasetManifest(
        name=task,
        task_type="classification",
        num_tasks=1,
        node_feat_cardinalities=ncard,
        edge_feat_cardinalities=ecard,
        num_graphs=len(graphs),
        source="synthetic",
        generator={"task": task, "n_graphs": n_graphs, "seed": seed},
        planted=dict(PLANTED[task], oracle_evidence=evidence),
    )
    return manifest, graphs

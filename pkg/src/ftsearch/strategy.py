"""Fine-tuning strategy space: identity augmentation, multi-scale fusion and
graph-level readout, plus the discrete fine-tuning model they assemble into."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .autodiff import Tensor

O_CONV = ("pre_trained",)
O_ID = ("zero_aug", "identity_aug", "trans_aug")
O_FUSE = ("last", "concat", "max", "mean", "ppr", "lstm", "gpr")
O_READ = ("sum_pooling", "mean_pooling", "max_pooling", "set2set", "sort_pooling", "neural_pooling")

PPR_BETA = 0.15
SET2SET_STEPS = 3
SORT_K = 10
TRANS_M = 16


@dataclass(frozen=True)
class StrategyChoice:
    id_aug: tuple
    fuse: str = "last"
    read: str = "mean_pooling"
    conv: str = "pre_trained"

    def __post_init__(self):
        object.__setattr__(self, "id_aug", tuple(self.id_aug))
        for a in self.id_aug:
            if a not in O_ID:
                raise ValueError(f"unknown identity augmentation {a!r}")
        if self.fuse not in O_FUSE:
            raise ValueError(f"unknown fusion {self.fuse!r}")
        if self.read not in O_READ:
            raise ValueError(f"unknown readout {self.read!r}")
        if self.conv not in O_CONV:
            raise ValueError(f"unknown conv candidate {self.conv!r}")

    @classmethod
    def vanilla(cls, num_layers):
        return cls(("zero_aug",) * num_layers, "last", "mean_pooling")

    def to_dict(self):
        return {"id_aug": list(self.id_aug), "fuse": self.fuse, "read": self.read}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["id_aug"]), d["fuse"], d["read"])

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def enumerate_space(num_layers, candidate_sets=None) -> int:
    """|O_conv|^K * |O_id|^K * |O_fuse| * |O_read|."""
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    sets = candidate_sets or {"conv": O_CONV, "id": O_ID, "fuse": O_FUSE, "read": O_READ}
    return len(sets["conv"]) ** num_layers * len(sets["id"]) ** num_layers * len(sets["fuse"]) * len(sets["read"])


def iter_space(num_layers, candidate_sets=None):
    """Every discrete strategy as a (conv tuple, id tuple, fuse, read) tuple."""
    sets = candidate_sets or {"conv": O_CONV, "id": O_ID, "fuse": O_FUSE, "read": O_READ}
    return itertools.product(
        itertools.product(sets["conv"], repeat=num_layers),
        itertools.product(sets["id"], repeat=num_layers),
        sets["fuse"],
        sets["read"],
    )


# ---------------------------------------------------------------------------
# parameters of the searchable parts


def readout_width(read, width):
    return 2 * width if read == "set2set" else width


def fused_width(fuse, cfg):
    return cfg.num_layers * cfg.hidden_dim if fuse == "concat" else cfg.hidden_dim


def width_class(fuse):
    return "cat" if fuse == "concat" else "d"


def _lstm_shapes(prefix, n_in, n_hid):
    return {
        prefix + "w_ih": (n_in, 4 * n_hid),
        prefix + "w_hh": (n_hid, 4 * n_hid),
        prefix + "b": (4 * n_hid,),
    }


def resolve_trans_m(cfg, m=None):
    """Bottleneck width for trans_aug; ``None`` means min(16, d/4)."""
    return max(1, min(TRANS_M, cfg.hidden_dim // 4)) if m is None else m


def id_aug_shapes(cfg, k, m=None):
    d = cfg.hidden_dim
    m = resolve_trans_m(cfg, m)
    if m > max(1, d // 4):
        raise ValueError(f"trans_aug bottleneck m={m} must be <= d/4 = {d // 4}")
    p = f"id.{k}."
    return {p + "down.w": (d, m), p + "down.b": (m,), p + "up.w": (m, d), p + "up.b": (d,)}


def fuse_shapes(cfg, fuse):
    d, K = cfg.hidden_dim, cfg.num_layers
    if fuse == "lstm":
        hh = max(d // 2, 1)
        shapes = {}
        shapes.update(_lstm_shapes("fuse.lstm.fwd.", d, hh))
        shapes.update(_lstm_shapes("fuse.lstm.bwd.", d, hh))
        shapes["fuse.lstm.att.w"] = (2 * hh, 1)
        shapes["fuse.lstm.att.b"] = (1,)
        return shapes
    if fuse == "gpr":
        return {"fuse.gpr.gamma": (K,)}
    return {}


def read_shapes(cls, width, read):
    p = f"read.{cls}.{read}."
    if read == "set2set":
        return _lstm_shapes(p, 2 * width, width)
    if read == "sort_pooling":
        return {p + "w": (SORT_K * width, width), p + "b": (width,)}
    if read == "neural_pooling":
        return {p + "gate.w": (width, width), p + "gate.b": (width,), p + "val.w": (width, width), p + "val.b": (width,)}
    return {}


def ppr_weights(K, beta=PPR_BETA):
    w = np.array([beta * (1 - beta) ** (K - k) for k in range(1, K + 1)])
    return w / w.sum()


def init_tensor(name, shape, rng):
    if name.endswith("gamma"):
        # start the signed layer weights at the ppr profile
        return Tensor(np.arctanh(ppr_weights(shape[0])), requires_grad=True)
    if len(shape) == 1 or name.endswith("up.w"):
        return Tensor(np.zeros(shape), requires_grad=True)
    return Tensor(rng.uniform(-1, 1, size=shape) / np.sqrt(shape[0]), requires_grad=True)


def init_params(shapes, rng):
    return {name: init_tensor(name, shape, rng) for name, shape in shapes.items()}


# ---------------------------------------------------------------------------
# the three searchable operations


def identity_aug(mode, h_prev: Tensor, z: Tensor, params=None, prefix="") -> Tensor:
    if mode == "zero_aug":
        return z
    if mode == "identity_aug":
        return h_prev + z
    if mode == "trans_aug":
        return bb.bottleneck(h_prev, params, prefix) + z
    raise ValueError(f"unknown identity augmentation {mode!r}")


def _lstm_cell(x, h, c, p, prefix):
    gates = ad.linear(x, p[prefix + "w_ih"], p[prefix + "b"])
    if h is not None:
        gates = gates + ad.matmul(h, p[prefix + "w_hh"])
    n = p[prefix + "w_hh"].shape[0]
    i = ad.sigmoid(ad.slice_cols(gates, 0, n))
    f = ad.sigmoid(ad.slice_cols(gates, n, 2 * n))
    g = ad.tanh(ad.slice_cols(gates, 2 * n, 3 * n))
    o = ad.sigmoid(ad.slice_cols(gates, 3 * n, 4 * n))
    c = i * g if c is None else f * c + i * g
    return o * ad.tanh(c), c


def lstm_attention(layers, params) -> Tensor:
    """Per-node layer weights from a bidirectional LSTM scorer, softmaxed over layers."""
    K = len(layers)
    fwd, h, c = [], None, None
    for x in layers:
        h, c = _lstm_cell(x, h, c, params, "fuse.lstm.fwd.")
        fwd.append(h)
    bwd, h, c = [None] * K, None, None
    for k in reversed(range(K)):
        h, c = _lstm_cell(layers[k], h, c, params, "fuse.lstm.bwd.")
        bwd[k] = h
    scores = [
        ad.linear(ad.concat([fwd[k], bwd[k]], axis=1), params["fuse.lstm.att.w"], params["fuse.lstm.att.b"])
        for k in range(K)
    ]
    return ad.softmax(ad.concat(scores, axis=1), axis=1)


def fuse(mode, layers: list[Tensor], params=None, beta=PPR_BETA) -> Tensor:
    K = len(layers)
    if K < 1:
        raise ValueError("fusion needs at least one layer")
    if mode == "last":
        return layers[-1]
    if mode == "concat":
        return ad.concat(layers, axis=1)
    if mode == "max":
        out = layers[0]
        for x in layers[1:]:
            out = _elementwise_max(out, x)
        return out
    if mode == "mean":
        out = layers[0]
        for x in layers[1:]:
            out = out + x
        return out * (1.0 / K)
    if mode == "ppr":
        w = ppr_weights(K, beta)
        out = layers[0] * w[0]
        for k in range(1, K):
            out = out + layers[k] * w[k]
        return out
    if mode == "gpr":
        g = ad.tanh(params["fuse.gpr.gamma"])
        out = layers[0] * ad.take(g, 0)
        for k in range(1, K):
            out = out + layers[k] * ad.take(g, k)
        return out
    if mode == "lstm":
        att = lstm_attention(layers, params)
        out = ad.scale_rows(layers[0], ad.slice_cols(att, 0, 1))
        for k in range(1, K):
            out = out + ad.scale_rows(layers[k], ad.slice_cols(att, k, k + 1))
        return out
    raise ValueError(f"unknown fusion {mode!r}")


def _elementwise_max(a: Tensor, b: Tensor) -> Tensor:
    # max(a, b) = b + relu(a - b)
    return b + ad.relu(a - b)


def _graph_sizes(graph_ids, num_graphs):
    sizes = np.bincount(graph_ids, minlength=num_graphs)
    if np.any(sizes == 0):
        raise ValueError(f"graph with zero nodes (graph {int(np.argmin(sizes))})")
    return sizes


def sort_order(hd: np.ndarray, graph_ids, num_graphs, k=SORT_K) -> np.ndarray:
    """[B, k] node indices: per graph, nodes sorted by last channel descending,
    ties broken by the remaining channels (descending) then node index; -1 pads."""
    keys = [np.arange(len(hd))] + [-hd[:, j] for j in range(hd.shape[1] - 1)] + [-hd[:, -1], graph_ids]
    order = np.lexsort(keys)
    out = np.full((num_graphs, k), -1, dtype=np.int64)
    starts = np.searchsorted(graph_ids[order], np.arange(num_graphs))
    sizes = np.bincount(graph_ids, minlength=num_graphs)
    for gi in range(num_graphs):
        take = min(k, sizes[gi])
        out[gi, :take] = order[starts[gi] : starts[gi] + take]
    return out


def readout(mode, h: Tensor, graph_ids, num_graphs, params=None, prefix="") -> Tensor:
    graph_ids = np.asarray(graph_ids, dtype=np.int64)
    sizes = _graph_sizes(graph_ids, num_graphs)
    if mode == "sum_pooling":
        return ad.segment_sum(h, graph_ids, num_graphs)
    if mode == "mean_pooling":
        return ad.scale_rows(ad.segment_sum(h, graph_ids, num_graphs), 1.0 / sizes)
    if mode == "max_pooling":
        return ad.segment_max(h, graph_ids, num_graphs)
    p = prefix + mode + "."
    if mode == "set2set":
        width = h.shape[1]
        q_star = Tensor(np.zeros((num_graphs, 2 * width)))
        hs, cs = None, None
        for _ in range(SET2SET_STEPS):
            hs, cs = _lstm_cell(q_star, hs, cs, params, p)
            e = ad.sum(h * ad.gather_rows(hs, graph_ids), axis=1)
            att = bb._segment_softmax(e, graph_ids, num_graphs)
            r = ad.segment_sum(ad.scale_rows(h, att), graph_ids, num_graphs)
            q_star = ad.concat([hs, r], axis=1)
        return q_star
    if mode == "sort_pooling":
        width = h.shape[1]
        idx = sort_order(h.data, graph_ids, num_graphs)
        rows = ad.gather_rows(h, idx.reshape(-1))
        flat = ad.reshape(rows, (num_graphs, SORT_K * width))
        return ad.linear(flat, params[p + "w"], params[p + "b"])
    if mode == "neural_pooling":
        gate = ad.sigmoid(ad.linear(h, params[p + "gate.w"], params[p + "gate.b"]))
        val = ad.linear(h, params[p + "val.w"], params[p + "val.b"])
        return ad.segment_sum(gate * val, graph_ids, num_graphs)
    raise ValueError(f"unknown readout {mode!r}")


# ---------------------------------------------------------------------------
# discrete fine-tuning model


class FineTuneModel:
    """Backbone layers with per-layer identity augmentation, then fusion,
    readout and a linear head.  All parameters live in ``self.params``."""

    def __init__(self, cfg: bb.BackboneConfig, choice: StrategyChoice, params: dict, trans_m=None):
        if len(choice.id_aug) != cfg.num_layers:
            raise ValueError(f"choice has {len(choice.id_aug)} id_aug entries for a {cfg.num_layers}-layer backbone")
        self.cfg = cfg
        self.choice = choice
        self.params = params
        self.trans_m = trans_m

    @property
    def head_input_width(self):
        return readout_width(self.choice.read, fused_width(self.choice.fuse, self.cfg))

    def backbone_names(self):
        return list(bb.param_shapes(self.cfg))

    def node_layers(self, b, train=False, rng=None):
        choice, params = self.choice, self.params

        def aug(k, h_prev, z):
            return identity_aug(choice.id_aug[k], h_prev, z, params, f"id.{k}.")

        adapters = {n: t for n, t in params.items() if n.startswith("adapter.")}
        return bb.forward(b, self.cfg, params, dropout_on=train, rng=rng, id_aug=aug, adapters=adapters or None)

    def forward(self, b, train=False, rng=None) -> Tensor:
        layers = self.node_layers(b, train, rng)
        h = fuse(self.choice.fuse, layers, self.params)
        prefix = f"read.{width_class(self.choice.fuse)}."
        g = readout(self.choice.read, h, b.graph_id, b.num_graphs, self.params, prefix)
        return ad.linear(g, self.params["head.w"], self.params["head.b"])


def new_part_shapes(cfg, choice: StrategyChoice, head_dim, trans_m=None):
    shapes = {}
    for k, a in enumerate(choice.id_aug):
        if a == "trans_aug":
            shapes.update(id_aug_shapes(cfg, k, trans_m))
    shapes.update(fuse_shapes(cfg, choice.fuse))
    shapes.update(read_shapes(width_class(choice.fuse), fused_width(choice.fuse, cfg), choice.read))
    width = readout_width(choice.read, fused_width(choice.fuse, cfg))
    shapes["head.w"] = (width, head_dim)
    shapes["head.b"] = (head_dim,)
    return shapes


def assemble_model(checkpoint, choice: StrategyChoice, head_dim, rng=None, trans_m=None, adapter_m=0):
    """Backbone from ``checkpoint``; new parts freshly initialized from ``rng``."""
    cfg = checkpoint.config
    if len(choice.id_aug) != cfg.num_layers:
        raise ValueError(f"choice has {len(choice.id_aug)} id_aug entries for a {cfg.num_layers}-layer checkpoint")
    rng = rng if rng is not None else np.random.default_rng(0)
    params = {n: Tensor(t.data.copy(), requires_grad=True) for n, t in checkpoint.params.items()}
    params.update(init_params(new_part_shapes(cfg, choice, head_dim, trans_m), rng))
    if adapter_m > 0:
        params.update(bb.init_adapters(cfg, adapter_m, rng))
    return FineTuneModel(cfg, choice, params, trans_m)

"""Message-passing backbones: GCN, SAGE, GIN and GAT.

Parameters live in a flat ``dict[str, Tensor]`` so that checkpoints,
optimizers and freezing rules can address them by name:

    node_emb.{slot}                  (slot 0 carries one extra mask-token row)
    layers.{k}.edge_emb.{slot}
    layers.{k}.<conv-specific names>
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphBatch

CONV_KINDS = ("gcn", "sage", "gin", "gat")


@dataclass
class BackboneConfig:
    conv_kind: str = "gin"
    num_layers: int = 5
    hidden_dim: int = 300
    node_feat_cardinalities: tuple = (120, 3)
    edge_feat_cardinalities: tuple = (6, 3)
    gin_epsilon: float = 0.0
    learn_epsilon: bool = False
    gat_heads: int = 2
    dropout_rate: float = 0.5

    def __post_init__(self):
        self.node_feat_cardinalities = tuple(int(c) for c in self.node_feat_cardinalities)
        self.edge_feat_cardinalities = tuple(int(c) for c in self.edge_feat_cardinalities)
        if self.conv_kind not in CONV_KINDS:
            raise ValueError(f"unknown conv kind {self.conv_kind!r}; expected one of {CONV_KINDS}")
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise ValueError("num_layers and hidden_dim must be >= 1")
        if self.conv_kind == "gat" and self.hidden_dim % self.gat_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by gat_heads {self.gat_heads}")
        if not self.node_feat_cardinalities:
            raise ValueError("need at least one node feature slot")

    def to_dict(self):
        d = asdict(self)
        d["node_feat_cardinalities"] = list(self.node_feat_cardinalities)
        d["edge_feat_cardinalities"] = list(self.edge_feat_cardinalities)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def mask_token(self):
        return self.node_feat_cardinalities[0]


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def param_shapes(cfg: BackboneConfig) -> dict[str, tuple]:
    """Name -> shape for every backbone parameter, in canonical order."""
    d = cfg.hidden_dim
    shapes = {}
    for s, c in enumerate(cfg.node_feat_cardinalities):
        shapes[f"node_emb.{s}"] = (c + 1 if s == 0 else c, d)
    for k in range(cfg.num_layers):
        p = f"layers.{k}."
        for s, c in enumerate(cfg.edge_feat_cardinalities):
            shapes[p + f"edge_emb.{s}"] = (c, d)
        if cfg.conv_kind == "gin":
            shapes[p + "mlp.w1"] = (d, 2 * d)
            shapes[p + "mlp.b1"] = (2 * d,)
            shapes[p + "mlp.w2"] = (2 * d, d)
            shapes[p + "mlp.b2"] = (d,)
            if cfg.learn_epsilon:
                shapes[p + "eps"] = (1,)
        elif cfg.conv_kind == "gcn":
            shapes[p + "w"] = (d, d)
            shapes[p + "b"] = (d,)
        elif cfg.conv_kind == "sage":
            shapes[p + "w"] = (2 * d, d)
            shapes[p + "b"] = (d,)
        else:
            dh = d // cfg.gat_heads
            for h in range(cfg.gat_heads):
                shapes[p + f"head{h}.w"] = (d, dh)
                shapes[p + f"head{h}.att_dst"] = (dh, 1)
                shapes[p + f"head{h}.att_src"] = (dh, 1)
            shapes[p + "out.w"] = (d, d)
            shapes[p + "out.b"] = (d,)
    return shapes


def count_params(cfg: BackboneConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("eps"):
            params[name] = Tensor(np.full(shape, cfg.gin_epsilon), requires_grad=True)
        elif len(shape) == 1:
            params[name] = _zeros(shape)
        else:
            fan_in = shape[1] if "emb" in name else shape[0]
            params[name] = _uniform(rng, shape, fan_in)
    return params


def embed(b: GraphBatch, cfg: BackboneConfig, params) -> tuple[Tensor, list[Tensor]]:
    """Summed slot embeddings for nodes, plus per-layer edge attributes."""
    h = None
    for s in range(len(cfg.node_feat_cardinalities)):
        e = ad.embedding(params[f"node_emb.{s}"], b.node_feats[:, s])
        h = e if h is None else h + e
    edge_attrs = []
    for k in range(cfg.num_layers):
        ea = None
        for s in range(len(cfg.edge_feat_cardinalities)):
            e = ad.embedding(params[f"layers.{k}.edge_emb.{s}"], b.edge_feats[:, s])
            ea = e if ea is None else ea + e
        if ea is None:
            ea = Tensor(np.zeros((b.num_edges, cfg.hidden_dim)))
        edge_attrs.append(ea)
    return h, edge_attrs


def bottleneck(x: Tensor, p, prefix: str) -> Tensor:
    """up(relu(down(x))): the d -> m -> d map used by adapters and trans_aug."""
    z = ad.relu(ad.linear(x, p[prefix + "down.w"], p[prefix + "down.b"]))
    return ad.linear(z, p[prefix + "up.w"], p[prefix + "up.b"])


def _segment_softmax(scores: Tensor, seg, n) -> Tensor:
    with ad.no_grad():
        m = ad.segment_max(scores, seg, n).data
    e = ad.exp(scores - Tensor(m[seg]))
    denom = ad.segment_sum(e, seg, n)
    return e / ad.gather_rows(denom, seg)


def conv_layer(kind, h: Tensor, b: GraphBatch, edge_attr: Tensor, p, prefix, cfg, adapters=None) -> Tensor:
    """One message-passing layer (no outer activation).

    Neighbor messages are ``H_u + edge_attr(u, v)``.  ``adapters`` optionally
    holds residual bottlenecks (``prefix`` names ``hid.`` / ``out.`` inside it)
    for the adapter fine-tuning baseline.
    """
    n = b.num_nodes
    msgs = ad.gather_rows(h, b.src) + edge_attr if b.num_edges else None

    def agg_sum():
        if msgs is None:
            return Tensor(np.zeros(h.shape))
        return ad.segment_sum(msgs, b.dst, n)

    if kind == "gin":
        eps = p.get(prefix + "eps")
        self_term = h * (1.0 + cfg.gin_epsilon) if eps is None else h + h * eps
        z = self_term + agg_sum()
        z = ad.relu(ad.linear(z, p[prefix + "mlp.w1"], p[prefix + "mlp.b1"]))
        if adapters is not None:
            z = z + bottleneck(z, adapters[0], adapters[1] + "hid.")
        z = ad.linear(z, p[prefix + "mlp.w2"], p[prefix + "mlp.b2"])
    elif kind == "gcn":
        inv = 1.0 / (b.in_degree() + 1.0)
        z = ad.scale_rows(agg_sum() + h, inv)
        z = ad.linear(z, p[prefix + "w"], p[prefix + "b"])
    elif kind == "sage":
        inv = 1.0 / np.maximum(b.in_degree(), 1.0)
        m = ad.scale_rows(agg_sum(), inv)
        z = ad.linear(ad.concat([h, m], axis=1), p[prefix + "w"], p[prefix + "b"])
    elif kind == "gat":
        heads = []
        for hd in range(cfg.gat_heads):
            q = prefix + f"head{hd}."
            w = p[q + "w"]
            if msgs is None:
                heads.append(Tensor(np.zeros((n, w.shape[1]))))
                continue
            xm = ad.matmul(msgs, w)
            xd = ad.matmul(h, w)
            score = ad.leaky_relu(
                ad.gather_rows(ad.matmul(xd, p[q + "att_dst"]), b.dst) + ad.matmul(xm, p[q + "att_src"])
            )
            att = _segment_softmax(score, b.dst, n)
            heads.append(ad.segment_sum(ad.scale_rows(xm, att), b.dst, n))
        z = ad.linear(ad.concat(heads, axis=1), p[prefix + "out.w"], p[prefix + "out.b"])
    else:
        raise ValueError(f"unknown conv kind {kind!r}")
    if adapters is not None:
        z = z + bottleneck(z, adapters[0], adapters[1] + "out.")
    return z


def forward(b: GraphBatch, cfg: BackboneConfig, params, dropout_on=False, rng=None, id_aug=None, adapters=None):
    """Return [H^(1), ..., H^(K)].

    ``id_aug`` is an optional callable ``(k, h_prev, z) -> h`` applied to the
    conv output of every layer; ``adapters`` an optional parameter dict for
    the adapter baseline.
    """
    h, edge_attrs = embed(b, cfg, params)
    outs = []
    for k in range(cfg.num_layers):
        pre = f"layers.{k}."
        ada = (adapters, f"adapter.{k}.") if adapters else None
        z = conv_layer(cfg.conv_kind, h, b, edge_attrs[k], params, pre, cfg, ada)
        if id_aug is not None:
            z = id_aug(k, h, z)
        if k < cfg.num_layers - 1:
            z = ad.relu(z)
        h = ad.dropout(z, cfg.dropout_rate, rng, train=dropout_on)
        outs.append(h)
    return outs


def adapter_shapes(cfg: BackboneConfig, m: int) -> dict[str, tuple]:
    """Residual bottleneck adapters: after every conv output, and for GIN also
    on the widened MLP hidden activation."""
    d = cfg.hidden_dim
    shapes = {}
    if m <= 0:
        return shapes
    for k in range(cfg.num_layers):
        sites = [("out.", d)]
        if cfg.conv_kind == "gin":
            sites.insert(0, ("hid.", 2 * d))
        for site, w in sites:
            p = f"adapter.{k}.{site}"
            shapes[p + "down.w"] = (w, m)
            shapes[p + "down.b"] = (m,)
            shapes[p + "up.w"] = (m, w)
            shapes[p + "up.b"] = (w,)
    return shapes


def init_adapters(cfg: BackboneConfig, m: int, rng) -> dict[str, Tensor]:
    out = {}
    for name, shape in adapter_shapes(cfg, m).items():
        if name.endswith("down.w"):
            out[name] = _uniform(rng, shape, shape[0])
        else:
            # zero up-projection: adapters start as the identity map
            out[name] = _zeros(shape)
    return out

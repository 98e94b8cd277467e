"""Differentiable search over fine-tuning strategies.

A Gumbel-softmax controller holds one logit vector per search dimension.
The supernet evaluates every candidate at every searchable site and blends
them by the sampled soft weights; its weights are shared across samples.
Shared weights are fitted on the train split and logits on the validation
split, alternating one pass each per epoch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import strategy as st
from .autodiff import Tensor
from .finetune import task_loss
from .graph import batch
from .optim import Adam
from .pretrain import DivergenceError
from .strategy import StrategyChoice

log = logging.getLogger(__name__)

FULL_SETS = {"conv": st.O_CONV, "id": st.O_ID, "fuse": st.O_FUSE, "read": st.O_READ}
DEGENERATE = {"id": "zero_aug", "fuse": "last", "read": "mean_pooling"}


def candidate_sets(ablate=()):
    """Candidate sets with each dimension in ``ablate`` collapsed to its degenerate choice."""
    sets = dict(FULL_SETS)
    for dim in ablate:
        if dim not in DEGENERATE:
            raise ValueError(f"cannot ablate {dim!r}; expected one of {sorted(DEGENERATE)}")
        sets[dim] = (DEGENERATE[dim],)
    return sets


@dataclass
class SearchConfig:
    tau_start: float = 5.0
    tau_end: float = 0.1
    controller_lr: float = 3e-3
    weight_lr: float = 1e-3
    epochs: int = 20
    mc_samples: int = 1
    batch_size: int = 32
    dropout: float = 0.5
    alternation: str = "epoch"
    seed: int = 0
    trans_m: int | None = None
    ablate: tuple = ()

    def __post_init__(self):
        self.ablate = tuple(self.ablate)
        if not self.tau_start >= self.tau_end > 0:
            raise ValueError("need tau_start >= tau_end > 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.alternation != "epoch":
            raise ValueError(f"unsupported alternation {self.alternation!r}")

    def to_dict(self):
        d = asdict(self)
        d["ablate"] = list(self.ablate)
        return d

    def tau(self, epoch):
        if self.epochs <= 1:
            return self.tau_start
        return self.tau_start * (self.tau_end / self.tau_start) ** (epoch / (self.epochs - 1))


# ---------------------------------------------------------------------------
# controller


class Controller:
    """Logits per dimension: one vector per layer for id_aug, one each for
    fuse, read and the singleton conv dimension."""

    def __init__(self, num_layers, sets=None):
        self.sets = sets or FULL_SETS
        self.num_layers = num_layers
        self.alpha = {
            "conv": Tensor(np.zeros(len(self.sets["conv"])), requires_grad=True),
            "fuse": Tensor(np.zeros(len(self.sets["fuse"])), requires_grad=True),
            "read": Tensor(np.zeros(len(self.sets["read"])), requires_grad=True),
        }
        for k in range(num_layers):
            self.alpha[f"id.{k}"] = Tensor(np.zeros(len(self.sets["id"])), requires_grad=True)

    def params(self):
        return self.alpha

    def sample(self, tau, rng):
        return {name: gumbel_sample(a, tau, rng) for name, a in self.alpha.items()}

    def logits(self):
        return {name: a.data.tolist() for name, a in self.alpha.items()}


def gumbel_sample(alpha: Tensor, tau: float, rng: np.random.Generator | None = None, u=None) -> Tensor:
    """softmax((alpha + g) / tau) with g = -log(-log U), U ~ Uniform(0, 1).

    ``alpha`` holds unnormalized log-probabilities.  Uniform draws of exactly
    0 are redrawn.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    alpha = ad.as_tensor(alpha)
    n = alpha.shape[0]
    if u is None:
        u = rng.random(n)
        while np.any(u <= 0.0):
            bad = u <= 0.0
            u[bad] = rng.random(int(bad.sum()))
    u = np.asarray(u, dtype=np.float64)
    g = -np.log(-np.log(u))
    return ad.softmax((alpha + Tensor(g)) * (1.0 / tau), axis=0)


def derive_discrete(alpha: dict, num_layers, sets=None) -> StrategyChoice:
    """Per-dimension argmax of the logits; ties go to the lowest index."""
    sets = sets or FULL_SETS

    def pick(name, dim):
        a = alpha[name]
        a = a.data if isinstance(a, Tensor) else np.asarray(a)
        return sets[dim][int(np.argmax(a))]

    return StrategyChoice(
        tuple(pick(f"id.{k}", "id") for k in range(num_layers)),
        pick("fuse", "fuse"),
        pick("read", "read"),
    )


# ---------------------------------------------------------------------------
# supernet


def _pad_cols(x: Tensor, width) -> Tensor:
    if x.shape[1] == width:
        return x
    return ad.concat([x, Tensor(np.zeros((x.shape[0], width - x.shape[1])))], axis=1)


class Supernet:
    """Every candidate of every dimension over one shared parameter set.

    Each fusion candidate feeds the blended readout and its own linear head;
    head logits are blended by the fusion weights.  Readout parameters are
    shared by all fusions of the same output width (d, or K*d for concat).
    Readout outputs are zero-padded to the widest readout of their class.
    """

    def __init__(self, checkpoint, head_dim, rng, sets=None, trans_m=None):
        self.cfg = bb.BackboneConfig.from_dict(checkpoint.config.to_dict())
        self.sets = sets or FULL_SETS
        self.trans_m = trans_m
        cfg = self.cfg
        params = {n: Tensor(t.data.copy(), requires_grad=True) for n, t in checkpoint.params.items()}
        shapes = {}
        if "trans_aug" in self.sets["id"]:
            for k in range(cfg.num_layers):
                shapes.update(st.id_aug_shapes(cfg, k, trans_m))
        for f in self.sets["fuse"]:
            shapes.update(st.fuse_shapes(cfg, f))
        self.classes = {}
        for f in self.sets["fuse"]:
            cls = st.width_class(f)
            self.classes.setdefault(cls, st.fused_width(f, cfg))
        self.head_width = {}
        for cls, width in self.classes.items():
            for r in self.sets["read"]:
                shapes.update(st.read_shapes(cls, width, r))
            self.head_width[cls] = max(st.readout_width(r, width) for r in self.sets["read"])
        for f in self.sets["fuse"]:
            shapes[f"head.{f}.w"] = (self.head_width[st.width_class(f)], head_dim)
            shapes[f"head.{f}.b"] = (head_dim,)
        params.update(st.init_params(shapes, rng))
        self.params = params

    def backbone_names(self):
        return list(bb.param_shapes(self.cfg))

    def weight_params(self):
        return self.params

    def forward(self, b, soft: dict, train=False, rng=None) -> Tensor:
        return mixed_forward(self, b, soft, train, rng)

    def to_discrete(self, choice: StrategyChoice) -> st.FineTuneModel:
        """Discrete model sharing this supernet's tensors (head rows sliced)."""
        cfg = self.cfg
        names = set(self.backbone_names())
        for k, a in enumerate(choice.id_aug):
            if a == "trans_aug":
                names |= set(st.id_aug_shapes(cfg, k, self.trans_m))
        names |= set(st.fuse_shapes(cfg, choice.fuse))
        cls = st.width_class(choice.fuse)
        names |= set(st.read_shapes(cls, st.fused_width(choice.fuse, cfg), choice.read))
        params = {n: self.params[n] for n in self.params if n in names}
        width = st.readout_width(choice.read, st.fused_width(choice.fuse, cfg))
        params["head.w"] = Tensor(self.params[f"head.{choice.fuse}.w"].data[:width].copy(), requires_grad=True)
        params["head.b"] = Tensor(self.params[f"head.{choice.fuse}.b"].data.copy(), requires_grad=True)
        return st.FineTuneModel(cfg, choice, params, self.trans_m)


def _check_soft(net: Supernet, soft):
    K = net.cfg.num_layers
    expected = {"fuse": len(net.sets["fuse"]), "read": len(net.sets["read"])}
    expected.update({f"id.{k}": len(net.sets["id"]) for k in range(K)})
    for name, n in expected.items():
        if name not in soft:
            raise ValueError(f"missing soft vector for {name}")
        if soft[name].shape != (n,):
            raise ValueError(f"soft vector {name} has shape {soft[name].shape}, expected ({n},) candidates")


def _blend(weights: Tensor, outputs: list[Tensor]) -> Tensor:
    out = None
    for i, o in enumerate(outputs):
        term = o * ad.take(weights, i)
        out = term if out is None else out + term
    return out


def mixed_forward(net: Supernet, b, soft: dict, train=False, rng=None) -> Tensor:
    """Blend every candidate's output by its soft weight at each site."""
    _check_soft(net, soft)
    params, sets, cfg = net.params, net.sets, net.cfg

    def aug(k, h_prev, z):
        outs = [st.identity_aug(m, h_prev, z, params, f"id.{k}.") for m in sets["id"]]
        return _blend(soft[f"id.{k}"], outs)

    layers = bb.forward(b, cfg, params, dropout_on=train, rng=rng, id_aug=aug)
    heads = []
    for f in sets["fuse"]:
        cls = st.width_class(f)
        fused = st.fuse(f, layers, params)
        reads = [
            _pad_cols(st.readout(r, fused, b.graph_id, b.num_graphs, params, f"read.{cls}."), net.head_width[cls])
            for r in sets["read"]
        ]
        g = _blend(soft["read"], reads)
        heads.append(ad.linear(g, params[f"head.{f}.w"], params[f"head.{f}.b"]))
    logits = _blend(soft["fuse"], heads)
    return logits


def one_hot_soft(net: Supernet, choice: StrategyChoice) -> dict:
    sets = net.sets
    soft = {}
    for k, a in enumerate(choice.id_aug):
        v = np.zeros(len(sets["id"]))
        v[sets["id"].index(a)] = 1.0
        soft[f"id.{k}"] = Tensor(v)
    for dim in ("fuse", "read"):
        v = np.zeros(len(sets[dim]))
        v[sets[dim].index(getattr(choice, dim))] = 1.0
        soft[dim] = Tensor(v)
    soft["conv"] = Tensor(np.ones(1))
    return soft


# ---------------------------------------------------------------------------
# bi-level loop


@dataclass
class SearchResult:
    choice: StrategyChoice
    logits: dict
    history: list = field(default_factory=list)
    supernet: Supernet | None = None
    sets: dict | None = None

    def to_dict(self):
        return {
            "choice": self.choice.to_dict(),
            "logits": self.logits,
            "candidates": {k: list(v) for k, v in (self.sets or FULL_SETS).items()},
            "history": self.history,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _batches(graphs, batch_size, order):
    return [batch([graphs[j] for j in order[i : i + batch_size]]) for i in range(0, len(graphs), batch_size)]


def search(checkpoint, train, val, cfg: SearchConfig, task_type="classification", on_epoch=None) -> SearchResult:
    """First-order alternating bi-level search.

    Each epoch: one pass over ``train`` updating shared weights with sampled
    soft strategies (dropout on), then one pass over ``val`` updating the
    logits with the mean of ``mc_samples`` reparameterized gradients
    (dropout off).  The temperature anneals geometrically per epoch.
    """
    if not train or not val:
        raise ValueError("search needs non-empty train and val splits")
    if {id(g) for g in train} & {id(g) for g in val}:
        raise ValueError("train and val splits overlap")
    sets = candidate_sets(cfg.ablate)
    rng = np.random.default_rng(cfg.seed)
    net = Supernet(checkpoint, train[0].num_tasks, rng, sets, cfg.trans_m)
    net.cfg.dropout_rate = cfg.dropout
    ctrl = Controller(net.cfg.num_layers, sets)
    w_opt = Adam(net.params, lr=cfg.weight_lr)
    a_opt = Adam(ctrl.alpha, lr=cfg.controller_lr)
    val_batches = _batches(val, cfg.batch_size, np.arange(len(val)))
    history = []
    for epoch in range(cfg.epochs):
        tau = cfg.tau(epoch)
        # (a) shared weights on train
        for p in ctrl.alpha.values():
            p.requires_grad = False
        for p in net.params.values():
            p.requires_grad = True
        for step, b in enumerate(_batches(train, cfg.batch_size, rng.permutation(len(train)))):
            soft = ctrl.sample(tau, rng)
            loss = task_loss(net.forward(b, soft, train=True, rng=rng), b, task_type)
            if not np.isfinite(loss.data).all():
                raise DivergenceError(f"non-finite search loss at epoch {epoch}, train batch {step}")
            w_opt.zero_grad()
            ad.backward(loss)
            w_opt.step()
        # (b) controller on val
        for p in ctrl.alpha.values():
            p.requires_grad = True
        for p in net.params.values():
            p.requires_grad = False
        val_loss, last_soft = 0.0, None
        for step, b in enumerate(val_batches):
            a_opt.zero_grad()
            for _ in range(cfg.mc_samples):
                soft = ctrl.sample(tau, rng)
                loss = task_loss(net.forward(b, soft, train=False), b, task_type)
                if not np.isfinite(loss.data).all():
                    raise DivergenceError(f"non-finite search loss at epoch {epoch}, val batch {step}")
                val_loss += loss.item() / cfg.mc_samples
                ad.backward(loss * (1.0 / cfg.mc_samples))
                last_soft = soft
            a_opt.step()
        for p in net.params.values():
            p.requires_grad = True
        sampled = derive_discrete({k: v.data for k, v in last_soft.items()}, net.cfg.num_layers, sets)
        history.append(
            {
                "epoch": epoch,
                "tau": tau,
                "val_loss": val_loss / len(val_batches),
                "sampled_choice": sampled.to_dict(),
            }
        )
        log.info("search epoch %d tau %.3f val_loss %.4f", epoch, tau, val_loss / len(val_batches))
        if on_epoch is not None:
            on_epoch(epoch, net, ctrl)
    for p in ctrl.alpha.values():
        p.grad = None
    choice = derive_discrete(ctrl.alpha, net.cfg.num_layers, sets)
    return SearchResult(choice, ctrl.logits(), history, net, sets)

"""Fixed fine-tuning strategies (vanilla, L2-SP, feature extractor, last-k,
adapter) and the evaluation metrics shared with the search."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from . import backbone as bb
from .graph import Graph, batch
from .optim import Adam
from .pretrain import DivergenceError
from .strategy import StrategyChoice, assemble_model

log = logging.getLogger(__name__)

STRATEGIES = ("vanilla", "l2sp", "feature_extractor", "last_k", "adapter")


@dataclass
class FinetuneConfig:
    strategy: str = "vanilla"
    k: int | None = None
    adapter_m: int = 4
    l2sp_lambda: float = 1e-2
    l2sp_head_lambda: float | None = None
    lr: float = 1e-3
    batch_size: int = 32
    dropout: float = 0.5
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    trans_m: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.strategy == "last_k" and self.k is None:
            raise ValueError("last_k needs k")

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricReport:
    task_type: str
    aggregate: float
    per_task: list
    history: list = field(default_factory=list)
    best_epoch: int = -1
    val_aggregate: float | None = None

    def to_dict(self):
        return {
            "task_type": self.task_type,
            "aggregate": self.aggregate,
            "per_task": self.per_task,
            "history": self.history,
            "best_epoch": self.best_epoch,
            "val_aggregate": self.val_aggregate,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# metrics


def roc_auc(scores, labels, mask=None):
    """Per-task ROC-AUC as a Mann-Whitney rank statistic (ties count 0.5).

    Returns a list with ``None`` for tasks lacking a positive or a negative.
    Raises ValueError if no task is evaluable.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
        mask = None if mask is None else np.asarray(mask)[:, None]
    mask = np.ones(labels.shape, bool) if mask is None else np.asarray(mask, bool)
    out = []
    for t in range(labels.shape[1]):
        m = mask[:, t]
        y, s = labels[m, t], scores[m, t]
        n_pos = int((y > 0.5).sum())
        n_neg = len(y) - n_pos
        if n_pos == 0 or n_neg == 0:
            out.append(None)
            continue
        ranks = rankdata(s)
        u = ranks[y > 0.5].sum() - n_pos * (n_pos + 1) / 2.0
        out.append(float(u / (n_pos * n_neg)))
    if all(a is None for a in out):
        raise ValueError("no evaluable task: every task lacks a positive or a negative label")
    return out


def rmse(preds, labels, mask=None):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, bool)
        preds, labels = preds[mask], labels[mask]
    if preds.size == 0:
        raise ValueError("rmse of an empty set")
    return float(np.sqrt(np.mean((preds - labels) ** 2)))


def aggregate(per_task):
    vals = [v for v in per_task if v is not None]
    return float(np.mean(vals))


def task_loss(logits, b, task_type):
    """Masked mean of BCE-with-logits (classification) or squared error (regression)."""
    mask = b.label_mask.astype(np.float64)
    y = np.where(b.label_mask, b.labels, 0.0)
    n = max(mask.sum(), 1.0)
    if task_type == "classification":
        per = ad.softplus(logits) - logits * ad.Tensor(y)
    else:
        diff = logits - ad.Tensor(y)
        per = diff * diff
    return ad.sum(per * ad.Tensor(mask)) * (1.0 / n)


def predict(model, graphs, batch_size=256):
    outs = []
    with ad.no_grad():
        for i in range(0, len(graphs), batch_size):
            outs.append(model.forward(batch(graphs[i : i + batch_size]), train=False).data)
    return np.concatenate(outs)


def evaluate(model, graphs, task_type):
    """(aggregate, per_task) on ``graphs``."""
    scores = predict(model, graphs)
    labels = np.stack([g.labels for g in graphs])
    mask = np.stack([g.label_mask for g in graphs])
    if task_type == "classification":
        per = roc_auc(scores, labels, mask)
    else:
        per = [rmse(scores[:, t], labels[:, t], mask[:, t]) if mask[:, t].any() else None for t in range(labels.shape[1])]
    return aggregate(per), per


def better(a, b, task_type):
    return a > b if task_type == "classification" else a < b


# ---------------------------------------------------------------------------
# freezing rules


def trainable_names(model, cfg: FinetuneConfig):
    """Names of parameters the strategy tunes; everything else is frozen."""
    bnames = set(model.backbone_names())
    K = model.cfg.num_layers
    names = []
    for n in model.params:
        if n not in bnames:
            if cfg.strategy == "adapter" or not n.startswith("adapter."):
                names.append(n)
            continue
        if cfg.strategy in ("vanilla", "l2sp"):
            names.append(n)
        elif cfg.strategy == "last_k":
            k = cfg.k
            if n.startswith("layers."):
                if int(n.split(".")[1]) >= K - k:
                    names.append(n)
            elif k >= K:
                # with every layer tuned the input embeddings are tuned too
                names.append(n)
    return names


def adapter_param_ratio(cfg: bb.BackboneConfig, m: int, head_dim: int = 1) -> float:
    """Tunable parameters of the adapter strategy (adapters + linear head) over
    the backbone's parameter count."""
    adapters = sum(int(np.prod(s)) for s in bb.adapter_shapes(cfg, m).values())
    head = cfg.hidden_dim * head_dim + head_dim
    return (adapters + head) / bb.count_params(cfg)


# ---------------------------------------------------------------------------


def _check_splits(splits):
    train, val, test = splits
    for name, s in zip(("train", "val", "test"), splits):
        if not s:
            raise ValueError(f"empty {name} split")
    ids = [set(map(id, s)) for s in splits]
    if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
        raise ValueError("splits are not disjoint")
    return train, val, test


def train_model(model, splits, cfg: FinetuneConfig, task_type, trainable, rng, penalty=None, step_callback=None):
    """Mini-batch Adam with early stopping on the validation aggregate.

    Restores the best-validation parameters and returns a MetricReport on the
    test split.
    """
    train, val, test = _check_splits(splits)
    model.cfg.dropout_rate = cfg.dropout
    for n, p in model.params.items():
        p.requires_grad = n in trainable
        p.grad = None
    opt = Adam({n: model.params[n] for n in trainable}, lr=cfg.lr)
    best, best_epoch, best_state, history, stale = None, -1, None, [], 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train))
        total, nb = 0.0, 0
        for step, i in enumerate(range(0, len(train), cfg.batch_size)):
            b = batch([train[j] for j in order[i : i + cfg.batch_size]])
            logits = model.forward(b, train=True, rng=rng)
            loss = task_loss(logits, b, task_type)
            if penalty is not None:
                loss = loss + penalty()
            if not np.isfinite(loss.data).all():
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {step}")
            opt.zero_grad()
            ad.backward(loss)
            if step_callback is not None:
                step_callback(model, epoch, step)
            opt.step()
            total += loss.item()
            nb += 1
        val_agg, _ = evaluate(model, val, task_type)
        history.append({"epoch": epoch, "train_loss": total / nb, "val_metric": val_agg})
        log.debug("epoch %d train_loss %.4f val %.4f", epoch, total / nb, val_agg)
        if best is None or better(val_agg, best, task_type):
            best, best_epoch, stale = val_agg, epoch, 0
            best_state = {n: p.data.copy() for n, p in model.params.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is not None:
        for n, p in model.params.items():
            p.data = best_state[n]
    for p in model.params.values():
        p.grad = None
        p.requires_grad = True
    test_agg, per = evaluate(model, test, task_type)
    return MetricReport(task_type, test_agg, per, history, best_epoch, best)


def finetune(checkpoint, choice: StrategyChoice | None, splits, cfg: FinetuneConfig, task_type="classification",
             step_callback=None):
    """Fine-tune ``checkpoint`` under ``cfg.strategy``; returns (model, MetricReport)."""
    if task_type not in ("classification", "regression"):
        raise ValueError(f"unknown task type {task_type!r}")
    bcfg = checkpoint.config
    choice = choice or StrategyChoice.vanilla(bcfg.num_layers)
    if cfg.strategy == "last_k" and not 0 <= cfg.k <= bcfg.num_layers:
        raise ValueError(f"k={cfg.k} outside [0, {bcfg.num_layers}]")
    train = splits[0]
    if not train:
        raise ValueError("empty train split")
    rng = np.random.default_rng(cfg.seed)
    adapter_m = cfg.adapter_m if cfg.strategy == "adapter" else 0
    model = assemble_model(checkpoint, choice, train[0].num_tasks, rng, cfg.trans_m, adapter_m)
    model.cfg = bb.BackboneConfig.from_dict(bcfg.to_dict())
    trainable = trainable_names(model, cfg)
    penalty = None
    if cfg.strategy == "l2sp":
        lam = cfg.l2sp_lambda
        lam_head = lam if cfg.l2sp_head_lambda is None else cfg.l2sp_head_lambda
        init = {n: ad.Tensor(t.data.copy()) for n, t in checkpoint.params.items()}
        heads = [n for n in model.params if n.startswith("head.")]

        def penalty():
            terms = None
            for n, t0 in init.items():
                diff = model.params[n] - t0
                term = ad.sum(diff * diff) * (lam / 2)
                terms = term if terms is None else terms + term
            for n in heads:
                p = model.params[n]
                terms = terms + ad.sum(p * p) * (lam_head / 2)
            return terms

    report = train_model(model, splits, cfg, task_type, trainable, rng, penalty, step_callback)
    return model, report

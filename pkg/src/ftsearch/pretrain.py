"""Self-supervised pre-training (edge prediction, attribute masking) and the
checkpoint container.

Checkpoint file layout::

    b"FTSCKPT\\n"                 8-byte magic
    uint64 little-endian         header length in bytes
    header                       UTF-8 JSON (sorted keys)
    payload                      raw little-endian float64 tensors, in header order
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .autodiff import Tensor
from .graph import Graph, batch
from .optim import Adam

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"FTSCKPT\n"


class CheckpointError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass
class Checkpoint:
    config: bb.BackboneConfig
    params: dict
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def num_params(self):
        return int(sum(t.data.size for t in self.params.values()))

    def equals(self, other: "Checkpoint") -> bool:
        if self.config != other.config or list(self.params) != list(other.params):
            return False
        return all(np.array_equal(self.params[n].data, other.params[n].data) for n in self.params)


def fresh_checkpoint(cfg: bb.BackboneConfig, seed: int, objective="none") -> Checkpoint:
    params = bb.init_params(cfg, np.random.default_rng(seed))
    return Checkpoint(cfg, params, {"objective": objective, "seed": seed, "epochs": 0})


def _header(c: Checkpoint) -> dict:
    tensors, offset = [], 0
    for name, t in c.params.items():
        nbytes = t.data.size * 8
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return {
        "format_version": c.format_version,
        "config": c.config.to_dict(),
        "metadata": c.metadata,
        "tensors": tensors,
    }


def save(c: Checkpoint, path) -> None:
    header = json.dumps(_header(c), sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in c.params.values())
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(header)) + header + payload)


def load(path, expected_config: bb.BackboneConfig | None = None, conv_kind: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or truncated)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: header parse error: {e}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} does not match supported version {FORMAT_VERSION}")
    cfg = bb.BackboneConfig.from_dict(header["config"])
    if conv_kind is not None and cfg.conv_kind != conv_kind:
        raise CheckpointError(f"descriptor mismatch: checkpoint conv_kind {cfg.conv_kind!r}, requested {conv_kind!r}")
    if expected_config is not None and cfg != expected_config:
        raise CheckpointError(f"descriptor mismatch: checkpoint {cfg} vs expected {expected_config}")
    shapes = bb.param_shapes(cfg)
    payload = raw[16 + hlen :]
    entries = header["tensors"]
    if [e["name"] for e in entries] != list(shapes):
        raise CheckpointError(f"{path}: tensor names do not match the {cfg.conv_kind} descriptor")
    total = sum(e["nbytes"] for e in entries)
    if len(payload) != total:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header declares {total} (truncated?)")
    params = {}
    for e in entries:
        shape = tuple(e["shape"])
        if shape != shapes[e["name"]]:
            raise CheckpointError(f"tensor {e['name']}: shape {shape} does not match descriptor {shapes[e['name']]}")
        arr = np.frombuffer(payload, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"]).reshape(shape)
        params[e["name"]] = Tensor(arr.astype(np.float64), requires_grad=True)
    return Checkpoint(cfg, params, header.get("metadata", {}), version)


# ---------------------------------------------------------------------------
# objectives


def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(loss, epoch, step):
    if not np.isfinite(loss.data).all():
        raise DivergenceError(f"non-finite pre-training loss at epoch {epoch}, batch {step}")


def edge_pairs(b, rng):
    """Positive (u, v) edges and one uniformly resampled same-graph negative per positive."""
    keep = b.src < b.dst
    pos = np.stack([b.src[keep], b.dst[keep]], axis=1)
    if len(pos) == 0:
        return pos, pos
    gid = b.graph_id[pos[:, 0]]
    sizes = np.bincount(b.graph_id, minlength=b.num_graphs)
    off = b.offsets[gid]
    neg = np.stack(
        [off + rng.integers(0, sizes[gid]), off + rng.integers(0, sizes[gid])],
        axis=1,
    )
    return pos, neg


def edge_scores(h: Tensor, pairs) -> Tensor:
    return ad.sum(ad.gather_rows(h, pairs[:, 0]) * ad.gather_rows(h, pairs[:, 1]), axis=1)


def _bce_logits(scores: Tensor, target: float) -> Tensor:
    # mean of softplus(s) - t * s
    return ad.mean(ad.softplus(scores) - scores * target)


def pretrain_edgepred(
    graphs: list[Graph], cfg: bb.BackboneConfig, seed=0, epochs=10, batch_size=32, lr=1e-3, history=None
) -> Checkpoint:
    if not graphs:
        raise ValueError("pre-training dataset is empty")
    if sum(len(g.edges) for g in graphs) == 0:
        raise ValueError("dataset has zero edges; nothing to reconstruct")
    rng = np.random.default_rng(seed)
    params = bb.init_params(cfg, rng)
    opt = Adam(params, lr=lr)
    for epoch in range(epochs):
        total, count = 0.0, 0
        for step, idx in enumerate(_minibatches(len(graphs), batch_size, rng)):
            b = batch([graphs[i] for i in idx])
            pos, neg = edge_pairs(b, rng)
            if len(pos) == 0:
                continue
            h = bb.forward(b, cfg, params, dropout_on=True, rng=rng)[-1]
            loss = _bce_logits(edge_scores(h, pos), 1.0) + _bce_logits(edge_scores(h, neg), 0.0)
            _check_finite(loss, epoch, step)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item()
            count += 1
        if history is not None:
            history.append(total / max(count, 1))
        log.info("edgepred epoch %d loss %.4f", epoch, total / max(count, 1))
    opt.zero_grad()
    return Checkpoint(cfg, params, {"objective": "edgepred", "seed": seed, "epochs": epochs})


def mask_nodes(b, mask_rate, mask_token, rng):
    """Return (masked batch features, masked node indices, original slot-0 labels)."""
    masked = np.flatnonzero(rng.random(b.num_nodes) < mask_rate)
    feats = b.node_feats.copy()
    targets = feats[masked, 0].copy()
    feats[masked, 0] = mask_token
    return feats, masked, targets


def pretrain_attrmask(
    graphs: list[Graph],
    cfg: bb.BackboneConfig,
    mask_rate=0.15,
    seed=0,
    epochs=10,
    batch_size=32,
    lr=1e-3,
    history=None,
    return_decoder=False,
):
    """Attribute-masking pre-training; the decoder is discarded unless
    ``return_decoder`` is set, in which case ``(checkpoint, decoder)`` is returned."""
    if not graphs:
        raise ValueError("pre-training dataset is empty")
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must lie in (0, 1)")
    vocab = cfg.node_feat_cardinalities[0]
    if vocab < 2:
        raise ValueError("nothing to predict: slot-0 vocabulary has size 1")
    rng = np.random.default_rng(seed)
    params = bb.init_params(cfg, rng)
    decoder = {
        "dec.w": Tensor(rng.uniform(-1, 1, (cfg.hidden_dim, vocab)) / np.sqrt(cfg.hidden_dim), requires_grad=True),
        "dec.b": Tensor(np.zeros(vocab), requires_grad=True),
    }
    opt = Adam({**params, **decoder}, lr=lr)
    for epoch in range(epochs):
        total, count = 0.0, 0
        for step, idx in enumerate(_minibatches(len(graphs), batch_size, rng)):
            b = batch([graphs[i] for i in idx])
            feats, masked, targets = mask_nodes(b, mask_rate, cfg.mask_token, rng)
            if len(masked) == 0:
                continue
            b.node_feats = feats
            h = bb.forward(b, cfg, params, dropout_on=True, rng=rng)[-1]
            logits = ad.linear(ad.gather_rows(h, masked), decoder["dec.w"], decoder["dec.b"])
            loss = ad.mean(ad.logsumexp(logits, axis=1) - ad.pick(logits, targets))
            _check_finite(loss, epoch, step)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item()
            count += 1
        if history is not None:
            history.append(total / max(count, 1))
        log.info("attrmask epoch %d loss %.4f", epoch, total / max(count, 1))
    opt.zero_grad()
    ckpt = Checkpoint(cfg, params, {"objective": "attrmask", "seed": seed, "epochs": epochs, "mask_rate": mask_rate})
    return (ckpt, decoder) if return_decoder else ckpt


def masked_token_accuracy(c: Checkpoint, decoder, graphs, mask_rate, seed=0):
    """Held-out accuracy of a decoder on masked slot-0 tokens (for diagnostics)."""
    rng = np.random.default_rng(seed)
    b = batch(graphs)
    feats, masked, targets = mask_nodes(b, mask_rate, c.config.mask_token, rng)
    b.node_feats = feats
    with ad.no_grad():
        h = bb.forward(b, c.config, c.params)[-1]
        logits = ad.linear(ad.gather_rows(h, masked), decoder["dec.w"], decoder["dec.b"])
    return float(np.mean(logits.data.argmax(axis=1) == targets))

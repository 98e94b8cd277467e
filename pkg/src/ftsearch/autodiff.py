"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records its parents and a closure mapping the output
gradient to parent gradients.  ``backward`` orders the recorded graph
topologically (the tape) and replays it once in reverse.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# broadcasting: equal shapes, scalar-tensor, or row-vector bias only


def _is_scalar(a):
    return a.size == 1 and a.ndim <= 1


def _check_binary(op, a, b):
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    if b.ndim == 1 and a.ndim == 2 and b.shape[0] == a.shape[1]:
        return
    if a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[1]:
        return
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0 or (len(shape) == 1 and shape[0] == 1 and g.shape != (1,)):
        return np.asarray(g.sum()).reshape(shape)
    # row-vector bias
    return g.sum(axis=0).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw)


def scale_rows(x, w) -> Tensor:
    """Multiply row ``i`` of a 2-D tensor by ``w[i]`` (``w`` of shape [N] or [N, 1])."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.data.reshape(-1).shape[0] != x.shape[0]:
        raise ValueError(f"scale_rows: shape mismatch {x.shape} vs {w.shape}")
    wshape = w.shape
    wc = w.data.reshape(-1, 1)
    xd = x.data

    def bw(g):
        return g * wc, (g * xd).sum(axis=1).reshape(wshape)

    return _make(xd * wc, (x, w), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(x) -> Tensor:
    x = as_tensor(x)
    m = x.data > 0
    return _make(np.where(m, x.data, 0.0), (x,), lambda g: (g * m,))


def leaky_relu(x, slope=0.2) -> Tensor:
    x = as_tensor(x)
    f = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * f, (x,), lambda g: (g * f,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign to avoid overflow in exp
    xd = x.data
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if not np.all(np.isfinite(xd)) or np.any(xd <= 0):
        raise ValueError("log: domain error (input must be finite and positive)")
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * s,))


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


def logsumexp(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    se = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(se) + m, axis=axis)
    s = e / se

    def bw(g):
        return (np.expand_dims(g, axis) * s,)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def max(x, axis=None) -> Tensor:  # noqa: A001
    """Max reduction; ties share the gradient equally."""
    x = as_tensor(x)
    out = x.data.max(axis=axis)
    keep = out if axis is None else np.expand_dims(out, axis)
    m = (x.data == keep).astype(np.float64)
    m /= m.sum(axis=axis, keepdims=axis is not None)

    def bw(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (m * gg,)

    return _make(np.asarray(out), (x,), bw)


def _check_segments(segments, n, num_segments):
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (n,):
        raise ValueError(f"segment ids shape {segments.shape} does not match data rows {n}")
    if n and (segments.min() < 0 or segments.max() >= num_segments):
        raise ValueError("segment ids must lie in [0, num_segments)")
    return segments


def segment_sum(x, segments, num_segments=None) -> Tensor:
    x = as_tensor(x)
    if num_segments is None:
        num_segments = int(np.max(segments)) + 1 if len(segments) else 0
    seg = _check_segments(segments, x.shape[0], num_segments)
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, seg, x.data)
    return _make(out, (x,), lambda g: (g[seg],))


def segment_mean(x, segments, num_segments=None) -> Tensor:
    """Mean per segment; empty segments give zero rows."""
    x = as_tensor(x)
    if num_segments is None:
        num_segments = int(np.max(segments)) + 1 if len(segments) else 0
    seg = _check_segments(segments, x.shape[0], num_segments)
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    inv = 1.0 / np.maximum(counts, 1.0)
    return scale_rows(segment_sum(x, seg, num_segments), inv)


def segment_max(x, segments, num_segments=None) -> Tensor:
    """Per-segment, per-column max; empty segments give zero rows."""
    x = as_tensor(x)
    if num_segments is None:
        num_segments = int(np.max(segments)) + 1 if len(segments) else 0
    seg = _check_segments(segments, x.shape[0], num_segments)
    out = np.full((num_segments,) + x.shape[1:], -np.inf)
    np.maximum.at(out, seg, x.data)
    empty = np.isneginf(out)
    out[empty] = 0.0
    hit = (x.data == out[seg]).astype(np.float64)
    cnt = np.zeros_like(out)
    np.add.at(cnt, seg, hit)
    share = hit / np.maximum(cnt[seg], 1.0)

    def bw(g):
        return (share * g[seg],)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# structural ops


def concat(xs, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        other = tuple(s for i, s in enumerate(x.shape) if i != ax)
        first = tuple(s for i, s in enumerate(xs[0].shape) if i != ax)
        if x.ndim != xs[0].ndim or other != first:
            raise ValueError(f"concat: shape mismatch {xs[0].shape} vs {x.shape}")
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), bw)


def stack_cols(xs) -> Tensor:
    """Stack equal-length vectors [N] or [N, 1] into an [N, k] matrix."""
    return concat([reshape(x, (-1, 1)) for x in xs], axis=1)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.T, (x,), lambda g: (g.T,))


def slice_cols(x, start, stop) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _make(x.data[:, start:stop], (x,), bw)


def take(x, i) -> Tensor:
    """Element ``i`` of a 1-D tensor as a shape-(1,) tensor."""
    x = as_tensor(x)
    n = x.shape[0]

    def bw(g):
        out = np.zeros(n)
        out[i] = g.reshape(-1)[0]
        return (out,)

    return _make(x.data[i : i + 1].copy(), (x,), bw)


def gather_rows(x, idx) -> Tensor:
    """Rows ``x[idx]``; an index of -1 yields a zero row (padding)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.max() >= n or idx.min() < -1):
        raise ValueError(f"gather_rows: index out of range for {n} rows")
    pad = idx < 0
    safe = np.where(pad, 0, idx)
    out = x.data[safe]
    if pad.any():
        out[pad] = 0.0
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        if pad.any():
            np.add.at(gx, safe[~pad], g[~pad])
        else:
            np.add.at(gx, safe, g)
        return (gx,)

    return _make(out, (x,), bw)


def embedding(table, idx) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding index out of vocabulary (size {table.shape[0]}): "
            f"range [{idx.min()}, {idx.max()}]"
        )
    return gather_rows(table, idx)


def pick(x, idx) -> Tensor:
    """``out[i] = x[i, idx[i]]`` for a 2-D tensor."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[rows, idx] = g
        return (gx,)

    return _make(x.data[rows, idx], (x,), bw)


def dropout(x, p, rng: np.random.Generator | None, train=True) -> Tensor:
    """Inverted dropout with drop probability ``p``; identity in eval mode."""
    x = as_tensor(x)
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep) / keep
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reverse pass


def _tape(loss: Tensor) -> list[Tensor]:
    """Topologically ordered nodes reachable from ``loss`` that need gradients."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward called twice on the same graph; re-run the forward pass")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    order = _tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            # leaf
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
        node._backward = None
        node._parents = ()
    loss._consumed = True


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps the tensor ``x`` to a scalar tensor and is evaluated
    ``2 * x.size + 1`` times.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            b = base.reshape(-1)[i]
            hi, lo = b + eps, b - eps
            flat[i] = hi
            fp = float(f(x).data)
            flat[i] = lo
            fm = float(f(x).data)
            flat[i] = b
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"f is not finite at perturbed coordinate {i}")
            # divide by the representable step, not 2 * eps
            numeric.reshape(-1)[i] = (fp - fm) / (hi - lo)
    x.data = base
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))

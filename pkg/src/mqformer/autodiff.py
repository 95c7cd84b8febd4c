"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op validates shapes up front and records a backward rule when any
input requires a gradient. Node ids are handed out in creation order, so
sorting reachable nodes by id yields a valid topological order for the
backward sweep.

Broadcasting is deliberately absent apart from scalar operands. Bias
addition is its own op (``add_bias``) and batched matmul accepts a 2-D
right operand shared across the batch, which is how weights are applied.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

_node_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand extents do not conform."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the enclosed block (inference only)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_ids)
    out.name = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _reduce_scalar(g: np.ndarray, like: Tensor) -> np.ndarray:
    return np.asarray(g.sum()).reshape(like.shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out_shape = a.shape if a.data.size >= b.data.size else b.shape

    def backward(g):
        ga = _reduce_scalar(g, a) if a.shape != out_shape else g
        gb = _reduce_scalar(g, b) if b.shape != out_shape else g
        return ga, gb

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out_shape = a.shape if a.data.size >= b.data.size else b.shape

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if a.shape != out_shape:
            ga = _reduce_scalar(ga, a)
        if b.shape != out_shape:
            gb = _reduce_scalar(gb, b)
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Divide by a scalar tensor."""
    if not _is_scalar(b):
        raise ShapeError(f"div: divisor must be scalar, got {b.shape}")
    bv = b.data.reshape(())

    def backward(g):
        return g / bv, np.asarray(-(g * a.data).sum() / bv**2).reshape(b.shape)

    return _make(a.data / bv, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has the same
    leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ for {a.shape} and {b.shape}")
    if b.ndim > a.ndim:
        raise ShapeError(f"matmul: right operand {b.shape} has more axes than {a.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 axes, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no tensors")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return _make(x.data[index], (x,), backward)


def gather_rows(x: Tensor, positions: Sequence[int]) -> Tensor:
    """Pick one row per batch element: ``x[b, positions[b]]`` -> (B, d)."""
    if x.ndim != 3:
        raise ShapeError(f"gather_rows: expected (B, S, d), got {x.shape}")
    pos = np.asarray(positions, dtype=np.int64)
    if pos.shape != (x.shape[0],):
        raise ShapeError(f"gather_rows: {pos.shape[0]} positions for batch of {x.shape[0]}")
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros(x.shape)
        full[rows, pos] = g
        return (full,)

    return _make(x.data[rows, pos], (x,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")

    def backward(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_pool(x: Tensor, axis: int) -> Tensor:
    ax = axis % x.ndim
    n = x.shape[ax]
    if n == 0:
        raise ShapeError(f"mean_pool: empty axis {axis} in {x.shape}")
    shape = x.shape
    return _make(
        x.data.mean(axis=ax),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape) / n,),
    )


# ---------------------------------------------------------------------------
# normalisation and probabilities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax. NaN inputs propagate NaN."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply gain/bias."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit length; rows with norm <= eps map to zero."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    live = n > eps
    safe = np.where(live, n, 1.0)
    y = np.where(live, x.data / safe, 0.0)

    def backward(g):
        return (np.where(live, (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe, 0.0),)

    return _make(y, (x,), backward)


def cross_entropy_logits(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``.

    ``logits`` has shape (..., V) and ``targets`` the leading shape. When every
    row is ignored the loss is 0 (and so is its gradient).
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    flat_t = targets.reshape(-1)
    keep = flat_t != ignore_index
    bad = keep & ((flat_t < 0) | (flat_t >= V))
    if bad.any():
        raise IndexError(f"cross_entropy: target {int(flat_t[bad][0])} outside [0, {V})")
    flat = logits.data.reshape(-1, V)
    n = int(keep.sum())
    if n == 0:
        return _make(np.asarray(0.0), (logits,), lambda g: (np.zeros(logits.shape),))
    rows = np.nonzero(keep)[0]
    sub_logits = flat[rows]
    z = sub_logits - sub_logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), flat_t[rows]]
    loss = (lse - picked).mean()

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), flat_t[rows]] -= 1.0
        full = np.zeros_like(flat)
        full[rows] = p * (float(g) / n)
        return (full.reshape(logits.shape),)

    return _make(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# attention


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention under a boolean visibility mask.

    ``q`` is (B, Sq, D) and ``k``/``v`` are (B, Sk, D); 2-D inputs are treated
    as a batch of one. ``mask[..., i, j]`` is True when query ``i`` may see key
    ``j``; it is (Sq, Sk) or (B, Sq, Sk). A query row with no visible key
    outputs zeros.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (reshape(t, (1,) + t.shape) for t in (q, k, v))
    B, Sq, D = q.shape
    Sk = k.shape[1]
    if k.shape != (B, Sk, D) or v.shape != (B, Sk, D):
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} disagree")
    if D % heads:
        raise ShapeError(f"attention: {heads} heads do not divide model dim {D}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape not in ((Sq, Sk), (B, Sq, Sk)):
        raise ShapeError(f"attention: mask {mask.shape} does not match sequence ({Sq}, {Sk})")
    if mask.ndim == 2:
        mask = np.broadcast_to(mask, (B, Sq, Sk))
    dh = D // heads
    c = 1.0 / np.sqrt(dh)

    def split(a, S):
        return a.reshape(B, S, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data, Sq), split(k.data, Sk), split(v.data, Sk)
    m = mask[:, None, :, :]
    scores = np.where(m, (qh @ kh.transpose(0, 1, 3, 2)) * c, -np.inf)
    live = m.any(axis=-1, keepdims=True)
    top = np.where(live, scores.max(axis=-1, keepdims=True, initial=-np.inf), 0.0)
    e = np.where(m, np.exp(scores - top), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    p = e / np.where(live, denom, 1.0)
    oh = p @ vh
    out = oh.transpose(0, 2, 1, 3).reshape(B, Sq, D)

    def backward(g):
        gh = g.reshape(B, Sq, heads, dh).transpose(0, 2, 1, 3)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * c
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh

        def merge(a, S):
            return a.transpose(0, 2, 1, 3).reshape(B, S, D)

        return merge(gq, Sq), merge(gk, Sk), merge(gv, Sk)

    result = _make(out, (q, k, v), backward)
    return reshape(result, (Sq, D)) if squeeze else result


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Nodes reachable from a root, in creation (hence topological) order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen = {root.node_id: root}
        stack = [root]
        while stack:
            node = stack.pop()
            for parent in node._parents:
                if parent.requires_grad and parent.node_id not in seen:
                    seen[parent.node_id] = parent
                    stack.append(parent)
        return cls(sorted(seen.values(), key=lambda t: t.node_id))

    def run(self, root: Tensor, seed: np.ndarray) -> dict:
        """Propagate ``seed`` from ``root``; returns {node_id: grad} for leaves."""
        pending = {root.node_id: seed}
        leaves = {}
        for node in reversed(self.nodes):
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                leaves[node.node_id] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                if parent.node_id in pending:
                    pending[parent.node_id] = pending[parent.node_id] + pg
                else:
                    pending[parent.node_id] = np.array(pg, dtype=np.float64)
        return leaves


def backward(loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> dict:
    """Reverse sweep from a scalar ``loss``.

    Leaf tensors that require grad receive ``.grad`` (accumulated). When
    ``params`` is given, returns {name: gradient array} with zeros for
    parameters the loss does not reach.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    leaves = {}
    if loss.requires_grad:
        tape = Tape.from_root(loss)
        leaves = tape.run(loss, np.ones(loss.shape))
        for node in tape.nodes:
            if node.node_id in leaves:
                g = leaves[node.node_id].reshape(node.shape)
                node.grad = g if node.grad is None else node.grad + g
    if params is None:
        return {}
    return {
        name: leaves[p.node_id].reshape(p.shape).copy() if p.node_id in leaves else np.zeros(p.shape)
        for name, p in params.items()
    }


def parameters_from(arrays: Mapping[str, np.ndarray], trainable: Optional[Iterable[str]] = None) -> dict:
    """Wrap raw arrays as leaf tensors; names outside ``trainable`` are frozen."""
    keep = None if trainable is None else set(trainable)
    return {
        name: Tensor(a, requires_grad=keep is None or name in keep, name=name)
        for name, a in arrays.items()
    }

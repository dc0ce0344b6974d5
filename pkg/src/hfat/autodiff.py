"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on tensors that require gradients appends a node to the
graph reachable from its output. Node ids come from a global counter, so a
node always has a larger id than any of its inputs and sorting by id gives a
topological order for free. ``backward`` replays that order once and then
releases the saved intermediates; a second call on the same graph raises
:class:`LifecycleError`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from hfat.errors import ContractError, DimensionError, LifecycleError, NumericError

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "_released")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self._released = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
        if not np.all(np.isfinite(data)):
            raise NumericError("operation produced NaN or Inf")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._id = next(_ids)
        out._released = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._released

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> Tensor:
        return tsum(self)

    def mean(self) -> Tensor:
        return tmean(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementary operations


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(out, (a, b), backward)


def tsum(a: Tensor) -> Tensor:
    return Tensor._result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor._result(
        np.asarray(a.data.sum() / n), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # subgradient at exactly 0 is 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused ``x @ w + b`` with a row-vector bias."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return Tensor._result(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# softmax family


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, batch: int, classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise IndexError(f"label out of range [0, {classes})")
    return y.astype(np.intp, copy=False)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean cross-entropy of raw logits against integer labels."""
    if logits.data.ndim != 2 or logits.shape[0] < 1:
        raise DimensionError(f"logits must be B x C with B >= 1, got {logits.shape}")
    b, c = logits.shape
    y = _check_labels(labels, b, c)
    logp = log_softmax_array(logits.data)
    rows = np.arange(b)
    loss = -logp[rows, y].sum() / b

    def backward(g):
        d = np.exp(logp)
        d[rows, y] -= 1.0
        return (d * (g / b),)

    return Tensor._result(np.asarray(loss), (logits,), backward)


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Batch mean of KL(softmax(p) || softmax(q)); both arguments differentiable."""
    if p_logits.shape != q_logits.shape or p_logits.data.ndim != 2:
        raise DimensionError(f"kl_divergence shape mismatch: {p_logits.shape} vs {q_logits.shape}")
    b = p_logits.shape[0]
    logp = log_softmax_array(p_logits.data)
    logq = log_softmax_array(q_logits.data)
    p = np.exp(logp)
    diff = logp - logq
    per_row = (p * diff).sum(axis=1)
    value = per_row.sum() / b

    def backward(g):
        gp = gq = None
        if p_logits.requires_grad:
            gp = p * (diff - per_row[:, None]) * (g / b)
        if q_logits.requires_grad:
            gq = (np.exp(logq) - p) * (g / b)
        return gp, gq

    return Tensor._result(np.asarray(value), (p_logits, q_logits), backward)


def margin_loss(logits: Tensor, labels, kappa: float = 0.0) -> Tensor:
    """Batch mean of max(z_y - max_{c != y} z_c, -kappa).

    Ties in the runner-up class resolve to the smallest index; rows clamped at
    ``-kappa`` contribute no gradient.
    """
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"margin loss needs B x C logits with C >= 2, got {logits.shape}")
    b, c = logits.shape
    y = _check_labels(labels, b, c)
    rows = np.arange(b)
    z = logits.data
    true = z[rows, y]
    others = z.copy()
    others[rows, y] = -np.inf
    runner = others.argmax(axis=1)
    raw = true - z[rows, runner]
    active = raw > -kappa
    value = np.where(active, raw, -kappa).sum() / b

    def backward(g):
        d = np.zeros_like(z)
        w = active * (g / b)
        d[rows, y] += w
        d[rows, runner] -= w
        return (d,)

    return Tensor._result(np.asarray(value), (logits,), backward)


# ---------------------------------------------------------------------------
# reverse pass


@dataclass
class Tape:
    """Nodes reachable from a loss, in topological (creation) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> Tape:
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen.add(t._id)
            if t._released:
                raise LifecycleError("graph already consumed by a previous backward(); rerun the forward pass")
            if t._backward is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._id)
        return cls(nodes)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Returns a map from each such leaf to the gradient contributed by this call.
    """
    if loss.data.size != 1 or loss.data.ndim != 0 and loss.data.shape != (1,):
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise LifecycleError("graph already consumed by a previous backward(); rerun the forward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
            if parent._backward is None:
                leaves[parent._id] = parent

    for node in tape.nodes:
        node._backward = None
        node._parents = ()
        node._released = True

    if loss._backward is None and not tape.nodes:
        leaves[loss._id] = loss

    out: dict[Tensor, np.ndarray] = {}
    for lid, leaf in leaves.items():
        g = np.asarray(grads[lid], dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``wrt`` (zeros where unreachable)."""
    got = backward(loss)
    return [got.get(t, np.zeros_like(t.data)) for t in wrt]

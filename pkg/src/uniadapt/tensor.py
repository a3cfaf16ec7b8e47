"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward rule on the output node. Calling
``backward`` on a scalar replays the recorded graph in reverse creation order,
which is a valid reverse topological order because an op's output is always
created after its inputs.

Broadcasting is deliberately narrow: an elementwise op is accepted only when
one operand already has the output shape (bias-add, scalar and mask/gate
style expansion). Anything else raises ``ShapeError``.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """A precondition of an op or a routine was violated."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.id = next(_ids)
        self.name = name

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Create the output node of an op.

        ``backward(g)`` receives the output gradient and returns one gradient
        (or None) per parent, in order.
        """
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any trainable tensor")
        order = _collect(self)
        grads: dict[int, np.ndarray] = {self.id: np.ones_like(self.data)}
        for node in order:
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is only defined by a python scalar")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self):
        return mul(tsum(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)


def _collect(root: Tensor) -> list[Tensor]:
    seen = {root.id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p.id not in seen:
                seen[p.id] = p
                stack.append(p)
    return [seen[k] for k in sorted(seen, reverse=True)]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None
    if out != a.shape and out != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} would both need expanding")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return Tensor.from_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return Tensor.from_op(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(np.log(xd), (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is either a 2-d weight or batched like ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not chain")
    if bd.ndim == 2:
        k = ad.shape[-1]

        def backward(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    elif ad.shape[:-2] == bd.shape[:-2]:

        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    else:
        raise ShapeError(f"matmul: batch dims of {ad.shape} and {bd.shape} differ")
    return Tensor.from_op(ad @ bd, (a, b), backward)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),)
    )


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ax = axis % parts[0].ndim
    sizes = [p.shape[ax] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([p.data for p in parts], axis=ax)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    return Tensor.from_op(data, parts, lambda g: tuple(np.split(g, cuts, axis=ax)))


def take(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather entries of ``x`` along ``axis`` (embedding lookup, row routing)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, (slice(None),) * axis + (idx,), g)
        return (out,)

    return Tensor.from_op(np.take(x.data, idx, axis=axis), (x,), backward)


def merge_rows(parts: Sequence[Tensor], index_sets: Sequence[np.ndarray], n: int) -> Tensor:
    """Inverse of routing: place ``parts[j]`` at rows ``index_sets[j]`` of an n-row output.

    The index sets must partition ``range(n)``.
    """
    index_sets = [np.asarray(ix, dtype=np.int64) for ix in index_sets]
    covered = np.sort(np.concatenate(index_sets)) if index_sets else np.array([], int)
    if not np.array_equal(covered, np.arange(n)):
        raise ContractError("merge_rows: index sets do not partition the batch")
    out = np.empty((n,) + parts[0].shape[1:])
    for p, ix in zip(parts, index_sets):
        out[ix] = p.data
    return Tensor.from_op(out, parts, lambda g: tuple(g[ix] for ix in index_sets))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; those entries get no gradient."""
    mask = np.broadcast_to(mask, x.shape)
    keep = ~mask
    return Tensor.from_op(np.where(mask, value, x.data), (x,), lambda g: (g * keep,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# fused normalizations and losses
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return Tensor.from_op(
        y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    )


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return Tensor.from_op(
        y, (x,), lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)
    )


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        dg = (g * xhat).reshape(-1, n).sum(axis=0)
        db = g.reshape(-1, n).sum(axis=0)
        return dx, dg, db

    return Tensor.from_op(xhat * gd + bias.data, (x, gain, bias), backward)


def mse(a: Tensor, b: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over all elements, or over those selected by ``mask``.

    ``mask`` may have fewer trailing dims than the operands (e.g. a frame mask
    for ``[B, T, d]`` features); it is expanded over the missing axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    if mask is None:
        w = np.ones_like(diff)
    else:
        m = np.asarray(mask, dtype=np.float64)
        m = m.reshape(m.shape + (1,) * (diff.ndim - m.ndim))
        w = np.broadcast_to(m, diff.shape)
    count = w.sum()
    if count == 0:
        raise ContractError("mse: mask selects no elements")
    val = (diff * diff * w).sum() / count

    def backward(g):
        ga = g * 2.0 * diff * w / count
        return ga, -ga

    return Tensor.from_op(np.asarray(val), (a, b), backward)


def stack_scalars(xs: Iterable[Tensor]) -> Tensor:
    xs = list(xs)
    return Tensor.from_op(
        np.array([x.item() for x in xs]),
        xs,
        lambda g: tuple(np.asarray(gi).reshape(x.shape) for gi, x in zip(g, xs)),
    )

"""Small reverse-mode differentiation engine over dense numpy arrays.

Tensors are immutable once created. Every op returns a new tensor that
remembers its parents and a closure mapping the upstream gradient to the
gradients of those parents. :func:`backward` walks the recorded graph in
reverse topological order.

Broadcasting is deliberately narrow: same-shape operands, a bias vector added
over the leading batch axis, or a 0-d (scalar) operand.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "DomainError", "constant", "parameter", "precision",
    "make_rng", "matmul", "add", "sub", "mul", "div", "neg", "relu", "tanh",
    "exp", "log", "square", "sum", "mean", "softmax", "log_softmax", "concat",
    "clip", "gaussian_sample", "pairwise_sq_dists", "masked_median",
    "stop_gradient", "backward", "sgd_step", "finite_diff_check",
    "GradCheckResult",
]


class ShapeError(ValueError):
    """Operand dimensions are incompatible for the requested op."""


class DomainError(ValueError):
    """Input lies outside the op's mathematical domain."""


_dtype: contextvars.ContextVar = contextvars.ContextVar("_dtype", default=np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily build tensors in ``dtype`` (used by the float64 gradcheck)."""
    token = _dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.reset(token)


def make_rng(seed) -> np.random.Generator:
    """Counter-based 64-bit generator (Philox) so runs replay bit-exactly."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_kink", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.array(data, dtype=_dtype.get(), copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self._kink = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _cast(arr):
    return np.asarray(arr, dtype=_dtype.get())


# -- broadcasting helpers --------------------------------------------------

def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar_b"
    if a.ndim == 0:
        return "scalar_a"
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "bias_b"
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return "bias_a"
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    if len(shape) == 0:
        return _cast(np.sum(grad, dtype=np.float64))
    # bias over the leading batch axis
    return _cast(np.sum(grad, axis=0, dtype=np.float64))


# -- elementwise binary ops ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_kind(a.data, b.data)
    out = a.data + b.data

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)
    return _node(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_kind(a.data, b.data)
    out = a.data - b.data

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)
    return _node(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_kind(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad * bd

    def bw(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)
    return _node(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_kind(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)
    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g
    return _node(ad @ bd, (a, b), bw, "matmul")


# -- elementwise unary ops -------------------------------------------------

def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = _node(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,), "relu")
    out._kink = mask
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def clip(a, lo, hi) -> Tensor:
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")
    out._kink = inside
    return out


def stop_gradient(a) -> Tensor:
    return Tensor(_as_tensor(a).data, op="stop_gradient")


def select_branch(a, state) -> Tensor:
    """Identity that records a discrete choice made outside the graph.

    Use it when ``a`` was computed under a data-dependent selection (e.g. a
    hard assignment mask) so that gradient checks treat a change of
    ``state`` like any other non-smooth branch switch.
    """
    a = _as_tensor(a)
    out = _node(a.data, (a,), lambda g: (g,), "select_branch")
    out._kink = np.array(state, copy=True)
    return out


# -- reductions ------------------------------------------------------------

def _reduce_sum(x: np.ndarray, axis, keepdims):
    if axis is None:
        # exact, order-independent total
        return math.fsum(x.astype(np.float64).ravel())
    return np.sum(x, axis=axis, dtype=np.float64, keepdims=keepdims)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    out = _cast(_reduce_sum(a.data, axis, keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (_cast(np.broadcast_to(g, shape)),)
    return _node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]
    if n == 0:
        raise DomainError("mean over an empty axis")
    out = _cast(_reduce_sum(a.data, axis, keepdims) / n)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (_cast(np.broadcast_to(g / n, shape)),)
    return _node(out, (a,), bw, "mean")


def softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DomainError("softmax over an empty axis")
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = _cast(e / np.sum(e, axis=axis, dtype=np.float64, keepdims=True))

    def bw(g):
        dot = np.sum(g * y, axis=axis, dtype=np.float64, keepdims=True)
        return (_cast(y * (g - dot)),)
    return _node(y, (a,), bw, "softmax")


def log_softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DomainError("log_softmax over an empty axis")
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, dtype=np.float64, keepdims=True))
    y = _cast(z - lse)
    p = np.exp(y)

    def bw(g):
        gs = np.sum(g, axis=axis, dtype=np.float64, keepdims=True)
        return (_cast(g - p * gs),)
    return _node(y, (a,), bw, "log_softmax")


def concat(tensors: Sequence, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _node(out, tensors, bw, "concat")


# -- composite ops with hand-written adjoints ------------------------------

def gaussian_sample(mu, logvar, rng: np.random.Generator) -> Tensor:
    """Reparameterised draw ``mu + exp(logvar / 2) * eps`` with eps ~ N(0, I)."""
    mu, logvar = _as_tensor(mu), _as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} vs logvar {logvar.shape}")
    eps = _cast(rng.standard_normal(mu.shape))
    std = np.exp(0.5 * logvar.data)
    out = mu.data + std * eps

    def bw(g):
        return g, _cast(0.5 * g * std * eps)
    return _node(out, (mu, logvar), bw, "gaussian_sample")


def pairwise_sq_dists(a, b) -> Tensor:
    """``D[i, j] = ||a_i - b_j||^2`` for row-sample matrices.

    Computed from explicit differences so ``D(b, a)`` is exactly ``D(a, b).T``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise distances of {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.sum(diff * diff, axis=2, dtype=np.float64)

    def bw(g):
        g3 = (2 * g)[:, :, None] * diff
        return _cast(np.sum(g3, axis=1, dtype=np.float64)), _cast(-np.sum(g3, axis=0, dtype=np.float64))
    return _node(_cast(out), (a, b), bw, "pairwise_sq_dists")


def masked_median(a, mask: np.ndarray) -> Tensor:
    """Median of the entries of ``a`` selected by a constant boolean ``mask``.

    The gradient routes to the one (odd count) or two (even count) order
    statistics that define the median.
    """
    a = _as_tensor(a)
    flat_idx = np.flatnonzero(np.broadcast_to(mask, a.shape))
    if flat_idx.size == 0:
        raise DomainError("median of an empty selection")
    vals = a.data.ravel()[flat_idx]
    order = np.argsort(vals, kind="stable")
    n = vals.size
    if n % 2:
        picks = [flat_idx[order[n // 2]]]
    else:
        picks = [flat_idx[order[n // 2 - 1]], flat_idx[order[n // 2]]]
    flat = a.data.ravel()
    out = np.float64(0.0)
    for p in picks:
        out += flat[p]
    out /= len(picks)

    def bw(g):
        grad = np.zeros(a.data.size, dtype=_dtype.get())
        for p in picks:
            grad[p] += g / len(picks)
        return (grad.reshape(a.shape),)
    node = _node(_cast(out), (a,), bw, "median")
    node._kink = np.array(picks)
    return node


# -- graph traversal -------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every trainable leaf.

    Returns a mapping ``leaf -> gradient array``; constants are absent.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
    leaves = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = _cast(g).reshape(node.shape)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def sgd_step(params: Sequence[Tensor], grads: dict, eta: float, velocity=None, momentum=0.0):
    """Return new leaves ``p - eta * g``; leaves without a gradient are kept.

    With ``momentum > 0`` a ``velocity`` dict (keyed by position) is updated
    in place.
    """
    out = []
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            out.append(p)
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        if momentum:
            v = velocity.get(i, 0.0) * momentum + g
            velocity[i] = v
            g = v
        out.append(Tensor(p.data - p.data.dtype.type(eta) * g, requires_grad=True))
    return out


# -- finite differences ----------------------------------------------------

@dataclass
class GradCheckResult:
    max_error: float
    excluded: list = field(default_factory=list)


def _kink_states(root: Tensor):
    states = []
    stack, seen = [root], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._kink is not None:
            states.append((node.op, node.shape, node._kink))
        stack.extend(node._parents)
    return states


def _same_branch(s1, s2) -> bool:
    if len(s1) != len(s2):
        return False
    return all(a[0] == b[0] and a[1] == b[1] and np.array_equal(a[2], b[2]) for a, b in zip(s1, s2))


def finite_diff_check(fn: Callable[[Tensor], Tensor], leaf_value, step=1e-3) -> GradCheckResult:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` receives a fresh leaf tensor built from ``leaf_value`` and must
    return a scalar loss; it is re-invoked for every perturbation, so any
    randomness inside it has to be seeded.  Coordinates whose +/- step
    evaluations land on different branches of a non-smooth op (relu sign,
    clip bounds, median order) are skipped and listed in ``excluded``.

    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 0 < step <= 1e-1:
        raise ValueError("step must lie in (0, 0.1]")
    base = np.array(leaf_value, dtype=_dtype.get())
    leaf = Tensor(base, requires_grad=True)
    grads = backward(fn(leaf))
    analytic = grads.get(leaf, np.zeros_like(base)).astype(np.float64)

    worst, excluded = 0.0, []
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus.flat[i] += step
        minus.flat[i] -= step
        # requires_grad keeps the graph alive so kink records can be compared
        lp = fn(Tensor(plus, requires_grad=True))
        lm = fn(Tensor(minus, requires_grad=True))
        if not _same_branch(_kink_states(lp), _kink_states(lm)):
            excluded.append(i)
            continue
        numeric = (float(lp.data) - float(lm.data)) / (2 * step)
        a = analytic.flat[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return GradCheckResult(worst, excluded)


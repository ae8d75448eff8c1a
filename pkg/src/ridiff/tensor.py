"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op returns a new :class:`Tensor`. When gradient recording is enabled
and at least one input is tracked, the output gets a ``node_id`` and a
closure mapping the output adjoint to input adjoints. Node ids grow
monotonically, so sorting reachable nodes by descending id is an exact
reverse topological order.

Broadcasting is explicit: elementwise ops accept equal shapes or a scalar
(size-1, zero-dim) operand; anything else must go through
:func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_counter = itertools.count(1)
_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Ops created inside this scope are never recorded."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "node_id", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_counter) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("division is only defined by a python scalar")
        return scalar_mul(self, 1.0 / other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t):
    raise ContractError(f"item() requires a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, parents, backward, op) -> Tensor:
    out = Tensor(out_data)
    out.op = op
    if grad_enabled() and any(p.tracked for p in parents):
        out.node_id = next(_counter)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_elementwise(op, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(grad, shape):
    # adjoint of an implicit scalar broadcast
    return grad if grad.shape == shape else np.asarray(grad.sum()).reshape(shape)


# -- elementwise binary -------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul_elementwise", a, b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)),
        "mul_elementwise",
    )


def scalar_mul(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _record(a.data * s, (a,), lambda g: (g * s,), "scalar_mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} do not conform")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _record(np.asarray(np.mean(diff * diff)), (a, b), backward, "mse")


# -- elementwise unary --------------------------------------------------
def _sigmoid(x):
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return _record(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sin(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record(np.sin(x), (a,), lambda g: (g * np.cos(x),), "sin")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record(x * x, (a,), lambda g: (2.0 * g * x,), "square")


# -- reductions and shape ops -------------------------------------------
def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scalar_mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: empty input list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} do not conform on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-rule broadcast; the adjoint sums over expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(src),)

    return _record(out, (a,), backward, "broadcast_to")


def stop_gradient(t) -> Tensor:
    """Same values, no adjoint path back to ``t``."""
    t = as_tensor(t)
    out = Tensor(t.data)
    out.op = "stop_gradient"
    return out


_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "scalar_mul": scalar_mul,
    "silu": silu,
    "relu": relu,
    "sum": tsum,
    "mean": mean,
    "reshape": reshape,
    "concat": lambda *ts, axis=-1: concat(ts, axis),
    "mse": mse,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "sin": sin,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
}


def tensor_op(kind: str, inputs, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``tensor_op("matmul", [a, b])``.

    Non-tensor arguments (the scalar of ``scalar_mul``, the target shape of
    ``reshape``) go in ``inputs`` after the tensors or in ``kwargs``.
    """
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


class GradMap(dict):
    """node_id -> adjoint array; also indexable by the leaf Tensor itself."""

    def _key(self, k):
        return k.node_id if isinstance(k, Tensor) else k

    def __getitem__(self, k):
        return super().__getitem__(self._key(k))

    def __contains__(self, k):
        return super().__contains__(self._key(k))

    def get(self, k, default=None):
        return super().get(self._key(k), default)


def backward(loss: Tensor, retain_graph: bool = False) -> GradMap:
    """Adjoints of ``loss`` for every tracked leaf reachable from it.

    Intermediate adjoints are dropped as soon as they have been propagated;
    unless ``retain_graph`` is set, the closures holding forward
    intermediates are released too.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar tensor, got {getattr(loss, 'shape', type(loss))}")
    if not loss.tracked:
        raise ContractError("backward: loss is not tracked by any computation record")

    nodes = {}
    stack = [loss]
    while stack:
        n = stack.pop()
        if n.node_id in nodes:
            continue
        nodes[n.node_id] = n
        stack.extend(p for p in n._parents if p.tracked)
    if loss._parents == () and loss._backward is None and loss.op != "leaf":
        raise ContractError("backward: graph already released; pass retain_graph=True to reuse it")

    adj = {loss.node_id: np.ones(loss.shape)}
    out = GradMap()
    for nid in sorted(nodes, reverse=True):
        n = nodes[nid]
        g = adj.pop(nid, None)
        if g is None:
            continue
        if not n._parents:
            if n.requires_grad:
                out[nid] = g
            continue
        for p, pg in zip(n._parents, n._backward(g)):
            if pg is None or not p.tracked:
                continue
            prev = adj.get(p.node_id)
            adj[p.node_id] = pg if prev is None else prev + pg
        if not retain_graph:
            n._backward = None
            n._parents = ()
    return out


def finite_diff_check(f, x, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a Tensor shaped like ``x`` to a scalar Tensor. Paths cut by
    :func:`stop_gradient` inside ``f`` are invisible to the analytic side, so
    only use this on functions whose dependence on ``x`` is fully tracked.
    """
    if eps <= 0:
        raise ContractError("finite_diff_check: eps must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("finite_diff_check: f returned a non-finite value")
    analytic = backward(out).get(leaf) if out.tracked else None
    if analytic is None:
        analytic = np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = xp.copy()
            xp[i] += eps
            xm[i] -= eps
            fp = f(Tensor(xp.reshape(x0.shape))).data
            fm = f(Tensor(xm.reshape(x0.shape))).data
            if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
                raise NumericError(f"finite_diff_check: non-finite f at coordinate {i}")
            flat[i] = (float(fp) - float(fm)) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0

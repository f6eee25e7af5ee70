"""Reverse-mode automatic differentiation with differentiable backward passes.

Every value lives in a :class:`Var`, which is also the graph node: it records
the operation tag, the parent nodes and the computed array.  The vector-Jacobian
products used by :func:`grad` are written with the same ``Var`` operations, so
with ``create_graph=True`` the backward pass is itself recorded and can be
differentiated again.  That is what lets a residual containing ``du/dx`` be
differentiated with respect to network weights inside an unrolled optimizer,
and the whole unroll be differentiated with respect to loss parameters.

Nodes hold numpy float64 arrays rather than scalars; reductions (``sum``) and
matrix products (``dot``) are single nodes.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Var",
    "DomainError",
    "UnassignedLeafError",
    "var",
    "const",
    "grad",
    "forward",
    "no_grad",
    "finite_difference_check",
    "exp",
    "log",
    "log1p",
    "tanh",
    "sin",
    "cos",
    "abs",
    "relu",
    "sigmoid",
    "softplus",
    "sqrt",
    "square",
    "sum",
    "mean",
    "dot",
    "concat",
    "reshape",
    "transpose",
    "where",
]

_ids = itertools.count()
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "record", True)


@contextmanager
def no_grad():
    """Evaluate without recording parents; results are constants."""
    prev = _recording()
    _state.record = False
    try:
        yield
    finally:
        _state.record = prev


class DomainError(ArithmeticError):
    """Raised when an op is evaluated outside its domain."""

    def __init__(self, op: str, node_id: int | None, detail: str):
        where_ = f"node {node_id}" if node_id is not None else "new node"
        super().__init__(f"{op}: {detail} at {where_}")
        self.op = op
        self.node_id = node_id


class UnassignedLeafError(KeyError):
    pass


class Var:
    """A node of the computational graph.

    ``op`` is ``"leaf"`` for differentiable inputs, ``"const"`` for constants
    and an operation tag otherwise.
    """

    __slots__ = ("id", "op", "parents", "value", "requires_grad", "attrs")
    __array_ufunc__ = None

    def __init__(self, value, op="const", parents=(), requires_grad=False, attrs=None):
        self.id = next(_ids)
        self.op = op
        self.parents = parents
        self.value = value
        self.requires_grad = requires_grad
        self.attrs = attrs

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.value)

    def __add__(self, other):
        return _apply("add", self, other)

    def __radd__(self, other):
        return _apply("add", other, self)

    def __sub__(self, other):
        return _apply("sub", self, other)

    def __rsub__(self, other):
        return _apply("sub", other, self)

    def __mul__(self, other):
        return _apply("mul", self, other)

    def __rmul__(self, other):
        return _apply("mul", other, self)

    def __truediv__(self, other):
        return _apply("div", self, other)

    def __rtruediv__(self, other):
        return _apply("div", other, self)

    def __neg__(self):
        return _apply("neg", self)

    def __pow__(self, p):
        if isinstance(p, Var):
            return exp(p * log(self))
        return _apply("pow", self, p=float(p))

    def __matmul__(self, other):
        return dot(self, other)

    def __rmatmul__(self, other):
        return dot(other, self)

    def __getitem__(self, index):
        return _apply("getitem", self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)


def var(value) -> Var:
    """Create a differentiable leaf."""
    return Var(np.array(value, dtype=np.float64), "leaf", (), True)


def const(value) -> Var:
    return Var(np.asarray(value, dtype=np.float64))


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# op table: name -> (forward(values, attrs), vjp(g, node, needs))
# ---------------------------------------------------------------------------


def _check_positive(op, x, node_id=None, strict=True):
    bad = (x <= 0) if strict else (x < 0)
    if np.any(bad):
        raise DomainError(op, node_id, "argument outside domain")


def _fwd_log(vals, attrs, node_id=None):
    _check_positive("log", vals[0], node_id)
    return np.log(vals[0])


def _fwd_log1p(vals, attrs, node_id=None):
    if np.any(vals[0] <= -1.0):
        raise DomainError("log1p", node_id, "argument outside domain")
    return np.log1p(vals[0])


def _fwd_div(vals, attrs, node_id=None):
    if np.any(vals[1] == 0):
        raise DomainError("div", node_id, "division by zero")
    return vals[0] / vals[1]


def _fwd_sqrt(vals, attrs, node_id=None):
    _check_positive("sqrt", vals[0], node_id, strict=False)
    return np.sqrt(vals[0])


def _fwd_pow(vals, attrs, node_id=None):
    x, p = vals[0], attrs["p"]
    if p != int(p):
        _check_positive("pow", x, node_id, strict=p < 0)
    elif p < 0 and np.any(x == 0):
        raise DomainError("pow", node_id, "division by zero")
    return x**p


def _fwd_getitem(vals, attrs, node_id=None):
    return vals[0][attrs["index"]]


def _fwd_scatter(vals, attrs, node_id=None):
    out = np.zeros(attrs["shape"])
    np.add.at(out, attrs["index"], vals[0])
    return out


def _fwd_sum(vals, attrs, node_id=None):
    return np.sum(vals[0], axis=attrs["axis"], keepdims=attrs["keepdims"])


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _softplus(x):
    return np.logaddexp(0.0, x)


_FWD: dict[str, Callable] = {
    "add": lambda v, a, i=None: v[0] + v[1],
    "sub": lambda v, a, i=None: v[0] - v[1],
    "mul": lambda v, a, i=None: v[0] * v[1],
    "div": _fwd_div,
    "neg": lambda v, a, i=None: -v[0],
    "pow": _fwd_pow,
    "exp": lambda v, a, i=None: np.exp(v[0]),
    "log": _fwd_log,
    "log1p": _fwd_log1p,
    "tanh": lambda v, a, i=None: np.tanh(v[0]),
    "sin": lambda v, a, i=None: np.sin(v[0]),
    "cos": lambda v, a, i=None: np.cos(v[0]),
    "abs": lambda v, a, i=None: np.abs(v[0]),
    "max": lambda v, a, i=None: np.maximum(v[0], 0.0),
    "sigmoid": lambda v, a, i=None: _sigmoid(v[0]),
    "softplus": lambda v, a, i=None: _softplus(v[0]),
    "sqrt": _fwd_sqrt,
    "sum": _fwd_sum,
    "dot": lambda v, a, i=None: v[0] @ v[1],
    "transpose": lambda v, a, i=None: v[0].T,
    "reshape": lambda v, a, i=None: v[0].reshape(a["shape"]),
    "broadcast": lambda v, a, i=None: np.broadcast_to(v[0], a["shape"]).copy(),
    "sum_to": lambda v, a, i=None: _sum_to(v[0], a["shape"]),
    "getitem": _fwd_getitem,
    "scatter": _fwd_scatter,
    "concat": lambda v, a, i=None: np.concatenate(v, axis=a["axis"]),
    "tanh_grad": lambda v, a, i=None: 1.0 - v[0] * v[0],
}


def _sum_to(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x.reshape(shape)


def _apply(op: str, *args, **attrs) -> Var:
    parents = tuple(_as_var(a) for a in args)
    value = _FWD[op]([p.value for p in parents], attrs)
    if _recording() and any(p.requires_grad for p in parents):
        return Var(value, op, parents, True, attrs or None)
    if _recording():
        return Var(value, op, parents, False, attrs or None)
    return Var(value)


def _unbroadcast(g: Var, shape: tuple) -> Var:
    if g.value.shape == shape:
        return g
    return _apply("sum_to", g, shape=shape)


def _vjp_add(g, n, needs):
    a, b = n.parents
    return [
        _unbroadcast(g, a.value.shape) if needs[0] else None,
        _unbroadcast(g, b.value.shape) if needs[1] else None,
    ]


def _vjp_sub(g, n, needs):
    a, b = n.parents
    return [
        _unbroadcast(g, a.value.shape) if needs[0] else None,
        _unbroadcast(-g, b.value.shape) if needs[1] else None,
    ]


def _vjp_mul(g, n, needs):
    a, b = n.parents
    return [
        _unbroadcast(g * b, a.value.shape) if needs[0] else None,
        _unbroadcast(g * a, b.value.shape) if needs[1] else None,
    ]


def _vjp_div(g, n, needs):
    a, b = n.parents
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(g / b, a.value.shape)
    if needs[1]:
        gb = _unbroadcast(-(g * n) / b, b.value.shape)
    return [ga, gb]


def _vjp_pow(g, n, needs):
    (x,) = n.parents
    p = n.attrs["p"]
    if p == 0:
        return [g * 0.0]
    if p == 1:
        return [g]
    if p == 2:
        return [g * (2.0 * x)]
    return [g * (p * x ** (p - 1))]


def _vjp_sqrt(g, n, needs):
    # derivative at 0 is set to 0, in line with the abs/max conventions
    mask = (n.value > 0).astype(np.float64)
    return [g * (0.5 * mask) / (n + (1.0 - mask))]


def _vjp_sum(g, n, needs):
    (x,) = n.parents
    axis, keepdims = n.attrs["axis"], n.attrs["keepdims"]
    if axis is not None and not keepdims:
        shape = list(x.value.shape)
        for ax in (axis if isinstance(axis, tuple) else (axis,)):
            shape[ax] = 1
        g = reshape(g, tuple(shape))
    return [_apply("broadcast", g, shape=x.value.shape)]


def _vjp_dot(g, n, needs):
    a, b = n.parents
    ga = gb = None
    if needs[0]:
        ga = dot(g, transpose(b)) if b.value.ndim == 2 else _outer_vjp(g, b, a.value.shape)
    if needs[1]:
        if a.value.ndim == 2 and b.value.ndim == 2:
            gb = dot(transpose(a), g)
        elif a.value.ndim == 2:
            gb = dot(transpose(a), g)
        else:
            gb = _outer(a, g)
    return [ga, gb]


def _outer_vjp(g, b, shape):
    # a @ b with b a vector: d/da = g[:, None] * b[None, :]
    return reshape(g, shape[:-1] + (1,)) * reshape(b, (1,) + b.value.shape)


def _outer(a, g):
    return reshape(a, a.value.shape + (1,)) * reshape(g, (1,) + g.value.shape)


def _vjp_getitem(g, n, needs):
    (x,) = n.parents
    return [_apply("scatter", g, index=n.attrs["index"], shape=x.value.shape)]


def _vjp_scatter(g, n, needs):
    return [_apply("getitem", g, index=n.attrs["index"])]


def _vjp_concat(g, n, needs):
    axis = n.attrs["axis"]
    out, start = [], 0
    for p, need in zip(n.parents, needs):
        k = p.value.shape[axis]
        if need:
            idx = [slice(None)] * g.value.ndim
            idx[axis] = slice(start, start + k)
            out.append(_apply("getitem", g, index=tuple(idx)))
        else:
            out.append(None)
        start += k
    return out


def _vjp_sigmoid(g, n, needs):
    return [g * (n * (1.0 - n))]


_VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": lambda g, n, needs: [-g],
    "pow": _vjp_pow,
    "exp": lambda g, n, needs: [g * n],
    "log": lambda g, n, needs: [g / n.parents[0]],
    "log1p": lambda g, n, needs: [g / (1.0 + n.parents[0])],
    "tanh": lambda g, n, needs: [g * _apply("tanh_grad", n)],
    "tanh_grad": lambda g, n, needs: [g * (-2.0 * n.parents[0])],
    "sin": lambda g, n, needs: [g * cos(n.parents[0])],
    "cos": lambda g, n, needs: [-(g * sin(n.parents[0]))],
    "abs": lambda g, n, needs: [g * np.sign(n.parents[0].value)],
    "max": lambda g, n, needs: [g * (n.parents[0].value > 0).astype(np.float64)],
    "sigmoid": _vjp_sigmoid,
    "softplus": lambda g, n, needs: [g * sigmoid(n.parents[0])],
    "sqrt": _vjp_sqrt,
    "sum": _vjp_sum,
    "dot": _vjp_dot,
    "transpose": lambda g, n, needs: [transpose(g)],
    "reshape": lambda g, n, needs: [reshape(g, n.parents[0].value.shape)],
    "broadcast": lambda g, n, needs: [_apply("sum_to", g, shape=n.parents[0].value.shape)],
    "sum_to": lambda g, n, needs: [_apply("broadcast", g, shape=n.parents[0].value.shape)],
    "getitem": _vjp_getitem,
    "scatter": _vjp_scatter,
    "concat": _vjp_concat,
}


# ---------------------------------------------------------------------------
# public elementwise functions; plain arrays pass straight to numpy
# ---------------------------------------------------------------------------


def _unary(op: str, np_fn: Callable):
    def fn(x):
        if isinstance(x, Var):
            return _apply(op, x)
        return np_fn(np.asarray(x, dtype=np.float64))

    fn.__name__ = op
    return fn


exp = _unary("exp", np.exp)
log = _unary("log", np.log)
log1p = _unary("log1p", np.log1p)
tanh = _unary("tanh", np.tanh)
sin = _unary("sin", np.sin)
cos = _unary("cos", np.cos)
abs = _unary("abs", np.abs)
relu = _unary("max", lambda x: np.maximum(x, 0.0))
sigmoid = _unary("sigmoid", _sigmoid)
softplus = _unary("softplus", _softplus)
sqrt = _unary("sqrt", np.sqrt)


def square(x):
    return x * x


def sum(x, axis=None, keepdims=False):
    if isinstance(x, Var):
        return _apply("sum", x, axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None):
    n = x.size if axis is None else x.shape[axis]
    return sum(x, axis=axis) * (1.0 / n)


def dot(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        return _apply("dot", a, b)
    return a @ b


def transpose(x):
    if isinstance(x, Var):
        return _apply("transpose", x)
    return np.transpose(x)


def reshape(x, shape):
    if isinstance(x, Var):
        return _apply("reshape", x, shape=tuple(shape))
    return np.reshape(x, shape)


def concat(xs: Sequence, axis: int = 0):
    if any(isinstance(x, Var) for x in xs):
        return _apply("concat", *xs, axis=axis)
    return np.concatenate(xs, axis=axis)


def where(mask, a, b):
    """Select elementwise with a constant mask (gradient flows to the chosen side)."""
    m = np.asarray(mask, dtype=np.float64)
    return a * m + b * (1.0 - m)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def _topo(output: Var, stop: set[int]) -> tuple[list[Var], set[int]]:
    """Nodes reaching any id in ``stop``, parents before children."""
    order: list[Var] = []
    reach: set[int] = set()
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            if node.id in stop or any(p.id in reach for p in node.parents):
                reach.add(node.id)
                order.append(node)
            continue
        if node.id in visited:
            continue
        visited.add(node.id)
        stack.append((node, True))
        if node.id in stop:
            continue
        for p in node.parents:
            if p.requires_grad and p.id not in visited:
                stack.append((p, False))
    return order, reach


def grad(output: Var, wrt: Sequence[Var], create_graph: bool = False) -> list[Var]:
    """Gradients of the scalar ``output`` with respect to each of ``wrt``.

    Targets that do not influence ``output`` get an exact zero.  With
    ``create_graph`` the returned Vars carry their own graph and can be
    differentiated again.
    """
    if output.value.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.value.shape}")
    for w in wrt:
        if not w.requires_grad:
            raise ValueError("grad target does not require grad")
    stop = {w.id for w in wrt}
    order, reach = _topo(output, stop)
    grads: dict[int, Var] = {}
    if output.id in reach:
        grads[output.id] = Var(np.ones_like(output.value))
    prev = _recording()
    _state.record = create_graph
    try:
        for node in reversed(order):
            g = grads.get(node.id)
            if g is None or node.id in stop:
                continue
            del grads[node.id]
            needs = [p.id in reach for p in node.parents]
            contribs = _VJP[node.op](g, node, needs)
            for p, need, c in zip(node.parents, needs, contribs):
                if not need or c is None:
                    continue
                acc = grads.get(p.id)
                grads[p.id] = c if acc is None else acc + c
    finally:
        _state.record = prev
    out = []
    for w in wrt:
        g = grads.get(w.id)
        out.append(Var(np.zeros_like(w.value)) if g is None else g)
    return out


def forward(outputs: Var | Sequence[Var], leaves: Mapping[Var, object]) -> dict[int, np.ndarray]:
    """Re-evaluate the graph above ``outputs`` with new leaf values.

    Returns a mapping from node id to value.  Constants keep their stored
    value; every ``leaf`` node reached must be assigned.
    """
    outs = [outputs] if isinstance(outputs, Var) else list(outputs)
    assigned = {v.id: np.asarray(val, dtype=np.float64) for v, val in leaves.items()}
    values: dict[int, np.ndarray] = {}
    stack: list[tuple[Var, bool]] = [(o, False) for o in outs]
    while stack:
        node, done = stack.pop()
        if node.id in values:
            continue
        if node.op == "leaf":
            if node.id not in assigned:
                raise UnassignedLeafError(f"leaf node {node.id} not assigned")
            values[node.id] = assigned[node.id]
            continue
        if node.op == "const" or not node.parents:
            values[node.id] = node.value
            continue
        if done:
            vals = [values[p.id] for p in node.parents]
            with np.errstate(all="ignore"):
                values[node.id] = _FWD[node.op](vals, node.attrs or {}, node.id)
            continue
        stack.append((node, True))
        for p in node.parents:
            if p.id not in values:
                stack.append((p, False))
    return values


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def _autodiff_tensor(f: Callable[[Var], Var], x0: np.ndarray, order: int) -> np.ndarray:
    n = x0.size
    x = var(x0.ravel())
    exprs = {(): f(x)}
    for _ in range(order):
        nxt = {}
        for idx, e in exprs.items():
            if not e.requires_grad:
                for i in range(n):
                    nxt[idx + (i,)] = const(0.0)
                continue
            (g,) = grad(e, [x], create_graph=True)
            for i in range(n):
                nxt[idx + (i,)] = g[i]
        exprs = nxt
    out = np.zeros((n,) * order)
    for idx, e in exprs.items():
        out[idx] = float(e.value)
    return out


def _fd_tensor(f: Callable[[Var], Var], x0: np.ndarray, order: int, h: float) -> np.ndarray:
    n = x0.size
    base = x0.ravel().astype(np.float64)

    def value(point):
        with no_grad():
            return float(f(const(point)).value)

    def nested(point, idx):
        if not idx:
            return value(point)
        i, rest = idx[0], idx[1:]
        step = np.zeros(n)
        step[i] = h
        return (nested(point + step, rest) - nested(point - step, rest)) / (2.0 * h)

    out = np.zeros((n,) * order)
    for idx in itertools.product(range(n), repeat=order):
        out[idx] = nested(base, idx)
    return out


def finite_difference_check(
    f: Callable[[Var], Var], point, order: int = 1, h: float | None = None
) -> float:
    """Largest relative gap between nested autodiff and central differences.

    ``f`` maps a 1-D Var to a scalar Var.  The gap for each tensor entry is
    ``|ad - fd| / max(|ad|, |fd|, 1)`` so that entries near zero are compared
    absolutely.
    """
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    if h is None:
        h = {1: 1e-5, 2: 1e-4, 3: 1e-3}[order]
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.atleast_1d(np.asarray(point, dtype=np.float64))
    ad = _autodiff_tensor(f, x0, order)
    fd = _fd_tensor(f, x0, order, h)
    scale = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1.0)
    return float(np.max(np.abs(ad - fd) / scale))

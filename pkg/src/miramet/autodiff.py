"""Reverse-mode differentiation over float64 numpy arrays.

Every operation on a :class:`Var` appends a node to an implicit record (the
parents plus a vector-Jacobian rule).  :func:`grad` sweeps that record in
reverse.  The vector-Jacobian rules are themselves written with the same
operations, so a sweep run with ``create_graph=True`` is differentiable again
(needed for unrolled meta-gradients).

Each node may also carry a forward-mode tangent.  Seeding an input with a
tangent ``v`` and running a ``create_graph`` sweep gives the directional
derivative of the gradient along ``v``: a Hessian-vector product computed
forward-over-reverse.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DiffError(Exception):
    pass


class ShapeError(DiffError, ValueError):
    pass


class NonFiniteError(DiffError, FloatingPointError):
    pass


def as_array64(x, name: str = "array") -> np.ndarray:
    """Validate ``x`` as a finite float64 array with positive dimensions."""
    arr = np.array(x, dtype=np.float64)
    if any(s <= 0 for s in arr.shape):
        raise ShapeError(f"{name} has a non-positive dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


class Var:
    """A node in the differentiation record."""

    __slots__ = ("value", "tangent", "parents", "vjp", "op")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), vjp=None, op="input", tangent=None):
        self.value = value
        self.tangent = tangent
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)


def variable(x, tangent=None) -> Var:
    """Create an input node.  ``tangent`` seeds forward mode."""
    value = np.asarray(x, dtype=np.float64)
    if tangent is not None:
        tangent = np.asarray(tangent, dtype=np.float64)
        if tangent.shape != value.shape:
            raise ShapeError(f"tangent shape {tangent.shape} != input shape {value.shape}")
    return Var(value, tangent=tangent)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tan(x):
    return x.tangent if isinstance(x, Var) else None


def _record(op, value, parents, vjp, tangent=None) -> Var:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    if tangent is not None and not np.all(np.isfinite(tangent)):
        raise NonFiniteError(f"non-finite tangent produced by '{op}'")
    return Var(value, parents, vjp, op, tangent)


def _is_var(*xs):
    for x in xs:
        if isinstance(x, Var):
            return True
    return False


def _unbroadcast(g, shape):
    gshape = np.shape(value_of(g))
    if gshape == shape:
        return g
    lead = len(gshape) - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and gshape[i + lead] != 1
    )
    return reshape(sum_(g, axis=axes), shape)


def _tangent_sum(ta, tb, shape):
    if ta is None:
        return None if tb is None else np.broadcast_to(tb, shape)
    if tb is None:
        return np.broadcast_to(ta, shape)
    return ta + tb


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    if not _is_var(a, b):
        return np.add(a, b)
    av, bv = value_of(a), value_of(b)
    with np.errstate(all="ignore"):
        out = av + bv
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g, o, a, b, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _record("add", out, (a, b), vjp, _tangent_sum(_tan(a), _tan(b), out.shape))


def sub(a, b):
    if not _is_var(a, b):
        return np.subtract(a, b)
    av, bv = value_of(a), value_of(b)
    with np.errstate(all="ignore"):
        out = av - bv
    sa, sb = np.shape(av), np.shape(bv)
    tb = _tan(b)

    def vjp(g, o, a, b, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(neg(g), sb) if needs[1] else None)

    return _record("sub", out, (a, b), vjp,
                   _tangent_sum(_tan(a), None if tb is None else -tb, out.shape))


def neg(a):
    if not isinstance(a, Var):
        return np.negative(a)
    ta = a.tangent
    return _record("neg", -a.value, (a,), lambda g, o, a, needs: (neg(g),),
                   None if ta is None else -ta)


def mul(a, b):
    if not _is_var(a, b):
        return np.multiply(a, b)
    av, bv = value_of(a), value_of(b)
    with np.errstate(all="ignore"):
        out = av * bv
    sa, sb = np.shape(av), np.shape(bv)
    ta, tb = _tan(a), _tan(b)
    t = _tangent_sum(None if ta is None else ta * bv, None if tb is None else av * tb, out.shape)

    def vjp(g, o, a, b, needs):
        return (_unbroadcast(mul(g, b), sa) if needs[0] else None,
                _unbroadcast(mul(g, a), sb) if needs[1] else None)

    return _record("mul", out, (a, b), vjp, t)


def div(a, b):
    if not _is_var(a, b):
        return np.divide(a, b)
    av, bv = value_of(a), value_of(b)
    with np.errstate(all="ignore"):
        out = av / bv
    sa, sb = np.shape(av), np.shape(bv)
    ta, tb = _tan(a), _tan(b)
    t = _tangent_sum(None if ta is None else ta / bv,
                     None if tb is None else -out * tb / bv, out.shape)

    def vjp(g, o, a, b, needs):
        return (_unbroadcast(div(g, b), sa) if needs[0] else None,
                _unbroadcast(neg(div(mul(g, o), b)), sb) if needs[1] else None)

    return _record("div", out, (a, b), vjp, t)


def square(a):
    if not isinstance(a, Var):
        return np.square(a)
    av, ta = a.value, a.tangent
    return _record("square", av * av, (a,),
                   lambda g, o, a, needs: (mul(g, mul(2.0, a)),),
                   None if ta is None else 2.0 * av * ta)


# ------------------------------------------------------------ linear algebra

def transpose(a):
    if not isinstance(a, Var):
        return np.swapaxes(a, -1, -2)
    ta = a.tangent
    return _record("transpose", np.swapaxes(a.value, -1, -2), (a,),
                   lambda g, o, a, needs: (transpose(g),),
                   None if ta is None else np.swapaxes(ta, -1, -2))


def matmul(a, b):
    """Matrix product of operands with ndim >= 2 (leading dims broadcast)."""
    if not _is_var(a, b):
        return np.matmul(a, b)
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    with np.errstate(all="ignore"):
        out = np.matmul(av, bv)
    sa, sb = av.shape, bv.shape
    ta, tb = _tan(a), _tan(b)
    t = _tangent_sum(None if ta is None else np.matmul(ta, bv),
                     None if tb is None else np.matmul(av, tb), out.shape)

    def vjp(g, o, a, b, needs):
        return (_unbroadcast(matmul(g, transpose(b)), sa) if needs[0] else None,
                _unbroadcast(matmul(transpose(a), g), sb) if needs[1] else None)

    return _record("matmul", out, (a, b), vjp, t)


# ---------------------------------------------------------- shape handling

def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    orig = a.value.shape
    ta = a.tangent
    return _record("reshape", a.value.reshape(shape), (a,),
                   lambda g, o, a, needs: (reshape(g, orig),),
                   None if ta is None else ta.reshape(shape))


def broadcast_to(a, shape):
    shape = tuple(shape)
    if not isinstance(a, Var):
        return np.broadcast_to(a, shape)
    orig = a.value.shape
    ta = a.tangent
    return _record("broadcast_to", np.broadcast_to(a.value, shape), (a,),
                   lambda g, o, a, needs: (_unbroadcast(g, orig),),
                   None if ta is None else np.broadcast_to(ta, shape))


def sum_(a, axis=None, keepdims=False):
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    orig = a.value.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)
    if axis is None:
        kshape = (1,) * len(orig)
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = {ax % len(orig) for ax in axes}
        kshape = tuple(1 if i in axes else s for i, s in enumerate(orig))
    ta = a.tangent

    def vjp(g, o, a, needs):
        return (broadcast_to(reshape(g, kshape), orig),)

    return _record("sum", np.asarray(out), (a,), vjp,
                   None if ta is None else np.asarray(np.sum(ta, axis=axis, keepdims=keepdims)))


def mean(a, axis=None):
    n = np.size(value_of(a)) if axis is None else np.shape(value_of(a))[axis]
    return div(sum_(a, axis=axis), float(n))


def getitem(a, idx):
    if not isinstance(a, Var):
        return a[idx]
    orig = a.value.shape
    ta = a.tangent
    return _record("getitem", a.value[idx], (a,),
                   lambda g, o, a, needs: (_scatter(g, idx, orig),),
                   None if ta is None else ta[idx])


def _scatter(g, idx, shape):
    """Adjoint of basic-slice indexing: place ``g`` into zeros at ``idx``."""
    if not isinstance(g, Var):
        out = np.zeros(shape)
        out[idx] = g
        return out
    tg = g.tangent
    out = np.zeros(shape)
    out[idx] = g.value
    t = None
    if tg is not None:
        t = np.zeros(shape)
        t[idx] = tg
    return _record("scatter", out, (g,), lambda gg, o, g, needs: (getitem(gg, idx),), t)


# --------------------------------------------------------- elementwise maps

def _unary(op, fn, dfn_value, dfn_graph):
    """Build an elementwise primitive.

    ``dfn_value(x, out)`` gives the derivative as an array (for tangents) and
    ``dfn_graph(x, out)`` gives it with graph ops (for differentiable sweeps).
    """
    def apply(a):
        if not isinstance(a, Var):
            return fn(np.asarray(a, dtype=np.float64))
        av = a.value
        with np.errstate(all="ignore"):
            out = fn(av)
        ta = a.tangent
        t = None if ta is None else ta * dfn_value(av, out)

        def vjp(g, o, a, needs):
            return (mul(g, dfn_graph(a, o)),)

        return _record(op, out, (a,), vjp, t)

    apply.__name__ = op
    return apply


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus_np(x):
    return np.logaddexp(0.0, x)


def _elu_np(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad_np(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _elu_curv_np(x):
    return np.where(x > 0, 0.0, np.exp(np.minimum(x, 0.0)))


exp = _unary("exp", np.exp, lambda x, o: o, lambda x, o: o)
log = _unary("log", np.log, lambda x, o: 1.0 / x, lambda x, o: div(1.0, x))
sigmoid = _unary("sigmoid", _sigmoid_np,
                 lambda x, o: o * (1.0 - o), lambda x, o: mul(o, sub(1.0, o)))
softplus = _unary("softplus", _softplus_np,
                  lambda x, o: _sigmoid_np(x), lambda x, o: sigmoid(x))
tanh = _unary("tanh", np.tanh,
              lambda x, o: 1.0 - o * o, lambda x, o: sub(1.0, square(o)))
# ELU with alpha=1; its curvature is exp(x) on x<0 and 0 elsewhere.
elu_curvature = _unary("elu_curvature", _elu_curv_np,
                       lambda x, o: o, lambda x, o: elu_curvature(x))
elu_grad = _unary("elu_grad", _elu_grad_np,
                  lambda x, o: _elu_curv_np(x), lambda x, o: elu_curvature(x))
elu = _unary("elu", _elu_np, lambda x, o: _elu_grad_np(x), lambda x, o: elu_grad(x))

ACTIVATIONS = {"softplus": softplus, "elu": elu, "sigmoid": sigmoid, "tanh": tanh}


# ------------------------------------------------------------ reverse sweep

@dataclass
class TapeStats:
    sweeps: int = 0
    max_sweep_nodes: int = 0
    total_sweep_nodes: int = 0


_monitors: list[TapeStats] = []


@contextlib.contextmanager
def tape_monitor():
    """Collect the size of every reverse sweep run inside the block."""
    stats = TapeStats()
    _monitors.append(stats)
    try:
        yield stats
    finally:
        _monitors.remove(stats)


def _topo_order(root: Var, stop: set) -> list:
    order, seen = [], {id(root)}
    stack = [(root, iter(() if id(root) in stop else root.parents))]
    while stack:
        node, it = stack[-1]
        for p in it:
            if isinstance(p, Var) and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(() if id(p) in stop else p.parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def grad(y: Var, wrt: Sequence[Var], create_graph: bool = False, seed=None) -> list:
    """Gradients of ``y`` with respect to each node in ``wrt``.

    Nodes in ``wrt`` are treated as independent inputs: the sweep does not
    continue past them.  With ``create_graph`` the results are graph nodes
    (differentiable again, and carrying tangents); otherwise plain arrays.
    """
    if not isinstance(y, Var):
        return [np.zeros_like(w.value) for w in wrt]
    if seed is None:
        if y.value.size != 1:
            raise ShapeError(f"grad needs a scalar output, got shape {y.value.shape}")
        seed = np.ones_like(y.value)
    stop = {id(w) for w in wrt}
    order = _topo_order(y, stop)
    for m in _monitors:
        m.sweeps += 1
        m.total_sweep_nodes += len(order)
        m.max_sweep_nodes = max(m.max_sweep_nodes, len(order))

    relevant = {}
    for node in order:
        nid = id(node)
        if nid in stop:
            relevant[nid] = True
        else:
            relevant[nid] = any(isinstance(p, Var) and relevant.get(id(p), False)
                                for p in node.parents)

    cot = {id(y): seed}
    for node in reversed(order):
        nid = id(node)
        if nid in stop or not relevant[nid] or node.vjp is None:
            continue
        g = cot.pop(nid, None)
        if g is None:
            continue
        parents = node.parents
        needs = [isinstance(p, Var) and relevant.get(id(p), False) for p in parents]
        if create_graph:
            contribs = node.vjp(g, node, *parents, needs)
        else:
            g = value_of(g)
            args = [value_of(p) for p in parents]
            contribs = node.vjp(g, node.value, *args, needs)
        for p, need, c in zip(parents, needs, contribs):
            if not need or c is None:
                continue
            pid = id(p)
            prev = cot.get(pid)
            cot[pid] = c if prev is None else add(prev, c)

    out = []
    for w in wrt:
        g = cot.get(id(w))
        if g is None:
            g = np.zeros_like(w.value)
        elif not create_graph:
            g = np.asarray(value_of(g), dtype=np.float64)
        elif np.shape(value_of(g)) != w.value.shape:
            g = broadcast_to(g, w.value.shape)
        out.append(g)
    return out


# -------------------------------------------------------------- public API

@dataclass
class DiffFunction:
    """A scalar function of named array inputs built from graph operations.

    ``fn`` is called with one keyword argument per entry of ``input_shapes``.
    """

    fn: Callable
    input_shapes: dict = field(default_factory=dict)

    def __call__(self, **inputs):
        return self.fn(**inputs)

    def evaluate(self, **inputs) -> float:
        return float(np.asarray(value_of(self.fn(**inputs))))

    def check_inputs(self, inputs: dict):
        for name, shape in self.input_shapes.items():
            if name not in inputs:
                raise ShapeError(f"missing input {name!r}")
            got = np.shape(inputs[name])
            if shape is not None and tuple(shape) != got:
                raise ShapeError(f"input {name!r} has shape {got}, expected {tuple(shape)}")
        extra = set(inputs) - set(self.input_shapes)
        if extra:
            raise ShapeError(f"unexpected inputs {sorted(extra)}")


def _call(f, x, tangents=None):
    """Evaluate ``f`` on fresh input nodes; returns (output, input nodes)."""
    if isinstance(x, dict):
        if isinstance(f, DiffFunction):
            f.check_inputs(x)
        tangents = tangents or {}
        nodes = {k: variable(v, tangents.get(k)) for k, v in x.items()}
        return f(**nodes), nodes
    if isinstance(f, DiffFunction):
        (name,) = f.input_shapes
        f.check_inputs({name: x})
        node = variable(x, tangents)
        return f(**{name: node}), node
    node = variable(x, tangents)
    return f(node), node


def _scalar(y):
    v = np.asarray(value_of(y))
    if v.size != 1:
        raise ShapeError(f"function must be scalar-valued, got shape {v.shape}")
    return float(v.reshape(()))


def value_and_grad(f, x):
    """Return ``(f(x), grad f(x))``; ``x`` may be an array or a dict of arrays."""
    y, nodes = _call(f, x)
    val = _scalar(y)
    if isinstance(nodes, dict):
        names = list(nodes)
        grads = grad(y, [nodes[k] for k in names])
        return val, dict(zip(names, grads))
    return val, grad(y, [nodes])[0]


def hessian_vector_product(f, x, v):
    """Exact Hessian-vector product, forward-over-reverse.

    For a dict input, ``v`` is a dict of tangents (missing entries are zero)
    and the result is a dict of Hessian-vector blocks.
    """
    if isinstance(x, dict):
        for k, vk in v.items():
            if np.shape(vk) != np.shape(x[k]):
                raise ShapeError(f"direction for {k!r} has shape {np.shape(vk)}, "
                                 f"expected {np.shape(x[k])}")
        y, nodes = _call(f, x, v)
        _scalar(y)
        names = list(nodes)
        grads = grad(y, [nodes[k] for k in names], create_graph=True)
        return {k: _tangent_or_zero(g, nodes[k].value) for k, g in zip(names, grads)}
    if np.shape(v) != np.shape(x):
        raise ShapeError(f"direction shape {np.shape(v)} != input shape {np.shape(x)}")
    y, node = _call(f, x, v)
    _scalar(y)
    (g,) = grad(y, [node], create_graph=True)
    return _tangent_or_zero(g, node.value)


def _tangent_or_zero(g, like):
    if isinstance(g, Var) and g.tangent is not None:
        return np.array(np.broadcast_to(g.tangent, like.shape), dtype=np.float64)
    return np.zeros_like(like)


def finite_difference_grad(f, x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = step
        e = e.reshape(x.shape)
        flat[i] = (_scalar(f(x + e)) - _scalar(f(x - e))) / (2.0 * step)
    return out

"""Reverse-mode automatic differentiation on a tape of array-valued nodes.

Each :class:`Node` stores its value and, for every parent, a function mapping
the upstream gradient to that parent's gradient contribution (a
vector-Jacobian product; for scalars this is just the local partial times the
upstream gradient).  Nodes are appended to their :class:`Tape` in creation
order, so reversing the tape is a valid reverse topological order.

Values derived only from constants are plain untracked nodes: evaluation
without a tape costs no bookkeeping.
"""
from __future__ import annotations

import numpy as np
from scipy import special

from .errors import DomainError, ShapeError, UsageError
from .moments import SQRT_2PI, normal_inv_cdf as _ndtri


class Node:
    __slots__ = ("value", "parents", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), tape=None):
        self.value = value
        self.parents = parents
        self.tape = tape
        self.index = -1

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def tracked(self):
        return self.tape is not None

    def __repr__(self):
        return f"Node(shape={self.shape}, tracked={self.tracked})"

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
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered node storage plus a registry of named parameters."""

    def __init__(self):
        self.nodes = []
        self.params = {}

    def _append(self, node):
        node.tape = self
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def parameter(self, name, value):
        if name in self.params:
            raise UsageError(f"parameter {name!r} registered twice")
        node = self._append(Node(np.array(value, dtype=np.float64)))
        self.params[name] = node
        return node

    def backward(self, output):
        """Gradient of a scalar ``output`` with respect to every parameter.

        Parameters the output does not depend on get a zero gradient.
        """
        if not isinstance(output, Node) or output.tape is not self:
            raise UsageError("output node is not on this tape")
        if np.size(output.value) != 1:
            raise UsageError("backward needs a scalar output")
        grads = {output.index: np.ones_like(output.value)}
        nodes = self.nodes
        for i in range(output.index, -1, -1):
            g = grads.get(i)
            if g is None:
                continue
            for parent, vjp in nodes[i].parents:
                contrib = vjp(g)
                j = parent.index
                grads[j] = grads[j] + contrib if j in grads else contrib
        return {
            name: np.array(grads.get(node.index, np.zeros_like(node.value)), dtype=np.float64)
            for name, node in self.params.items()
        }


def backward(tape, output):
    return tape.backward(output)


def constant(value):
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value, dtype=np.float64))


def value_of(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _tape_of(inputs):
    tape = None
    for x in inputs:
        if isinstance(x, Node) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise UsageError("operands belong to different tapes")
    return tape


def _make(value, inputs, vjps):
    """Create the result node, recording only edges to tracked inputs."""
    tape = _tape_of(inputs)
    if tape is None:
        return Node(value)
    parents = tuple(
        (x, fn) for x, fn in zip(inputs, vjps) if isinstance(x, Node) and x.tape is not None
    )
    return tape._append(Node(value, parents))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise binary ------------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _make(out, (a, b), (lambda g: _unbroadcast(g, av.shape),
                               lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _make(out, (a, b), (lambda g: _unbroadcast(g, av.shape),
                               lambda g: _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _make(out, (a, b), (lambda g: _unbroadcast(g * bv, av.shape),
                               lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _make(out, (a, b), (lambda g: _unbroadcast(g / bv, av.shape),
                               lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def minimum(a, b):
    av, bv = value_of(a), value_of(b)
    pick_a = (av <= bv) | np.isnan(av)
    out = np.where(pick_a, av, bv)
    return _make(out, (a, b), (lambda g: _unbroadcast(g * pick_a, av.shape),
                               lambda g: _unbroadcast(g * ~pick_a, bv.shape)))


def maximum(a, b):
    av, bv = value_of(a), value_of(b)
    pick_a = (av >= bv) | np.isnan(av)  # NaN propagates as in np.maximum
    out = np.where(pick_a, av, bv)
    return _make(out, (a, b), (lambda g: _unbroadcast(g * pick_a, av.shape),
                               lambda g: _unbroadcast(g * ~pick_a, bv.shape)))


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


# -- elementwise unary -------------------------------------------------------

def neg(x):
    return _make(-value_of(x), (x,), (lambda g: -g,))


def power(x, p):
    """``x ** p`` for a constant exponent ``p``."""
    if isinstance(p, Node):
        raise UsageError("power supports constant exponents only")
    xv = value_of(x)
    if p == 2:
        return _make(xv * xv, (x,), (lambda g: 2.0 * g * xv,))
    out = xv**p
    return _make(out, (x,), (lambda g: g * p * xv ** (p - 1),))


def square(x):
    return power(x, 2)


def exp(x):
    out = np.exp(value_of(x))
    return _make(out, (x,), (lambda g: g * out,))


def log(x):
    xv = value_of(x)
    if np.any(xv <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(xv), (x,), (lambda g: g / xv,))


def sqrt(x):
    xv = value_of(x)
    if np.any(xv < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(xv)
    # zero inputs get a zero subgradient instead of inf
    safe = np.where(out > 0, out, np.inf)
    return _make(out, (x,), (lambda g: g / (2.0 * safe),))


def sigmoid(x):
    out = special.expit(value_of(x))
    return _make(out, (x,), (lambda g: g * out * (1.0 - out),))


def softplus(x):
    xv = value_of(x)
    out = np.logaddexp(0.0, xv)
    return _make(out, (x,), (lambda g: g * special.expit(xv),))


def leaky_relu(x, slope=0.01):
    """Leaky ReLU; the derivative at exactly 0 is the negative-side slope."""
    xv = value_of(x)
    out = leaky_relu_value(xv, slope)
    return _make(out, (x,), (lambda g: g * leaky_relu_grad(xv, slope),))


def leaky_relu_value(x, slope):
    return np.maximum(x, slope * x) if 0 <= slope <= 1 else np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope):
    return np.where(x > 0, 1.0, slope)


def normal_cdf(x):
    xv = value_of(x)
    out = special.ndtr(xv)
    return _make(out, (x,), (lambda g: g * np.exp(-0.5 * xv * xv) / SQRT_2PI,))


def normal_inv_cdf(p):
    out = _ndtri(value_of(p))
    return _make(out, (p,), (lambda g: g * SQRT_2PI * np.exp(0.5 * out * out),))


# -- reductions and shape ops ------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001
    xv = value_of(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return _make(out, (x,), (vjp,))


def mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) / float(n)


def reshape(x, shape):
    xv = value_of(x)
    return _make(xv.reshape(shape), (x,), (lambda g: g.reshape(xv.shape),))


def expand_last(x):
    return reshape(x, value_of(x).shape + (1,))


def transpose(x, axes=None):
    xv = value_of(x)
    out = np.transpose(xv, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), (lambda g: np.transpose(g, inv),))


def getitem(x, idx):
    xv = value_of(x)

    def vjp(g):
        full = np.zeros_like(xv)
        np.add.at(full, idx, g)
        return full

    return _make(xv[idx], (x,), (vjp,))


def take_last(x, k):
    """``x[..., k]`` with a cheap basic-slicing backward pass."""
    xv = value_of(x)

    def vjp(g):
        full = np.zeros_like(xv)
        full[..., k] = g
        return full

    return _make(np.ascontiguousarray(xv[..., k]), (x,), (vjp,))


def stack(xs, axis=-1):
    vals = [value_of(x) for x in xs]
    out = np.stack(vals, axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    vjps = [(lambda g, k=k: np.take(g, k, axis=ax)) for k in range(len(xs))]
    return _make(out, tuple(xs), tuple(vjps))


def concatenate(xs, axis=-1):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    vjps = [
        (lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis))
        for lo, hi in zip(bounds[:-1], bounds[1:])
    ]
    return _make(out, tuple(xs), tuple(vjps))


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError("matmul supports 2-D operands only")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    # BLAS is far slower on strided operands than the cost of a copy
    av = np.ascontiguousarray(av)
    bv = np.ascontiguousarray(bv)
    out = av @ bv
    return _make(out, (a, b), (lambda g: np.ascontiguousarray(g) @ np.ascontiguousarray(bv.T),
                               lambda g: np.ascontiguousarray(av.T) @ np.ascontiguousarray(g)))


def where(cond, a, b):
    """Select elementwise with a constant boolean mask."""
    cond = np.asarray(cond, dtype=bool)
    av, bv = value_of(a), value_of(b)
    out = np.where(cond, av, bv)
    return _make(out, (a, b), (lambda g: _unbroadcast(np.where(cond, g, 0.0), av.shape),
                               lambda g: _unbroadcast(np.where(cond, 0.0, g), bv.shape)))


def point_moments(mean, var, offsets, weights, f, fprime, var_scale=1.0):
    """Fused mean/variance of ``f`` over points ``mean + sqrt(var) * offsets``.

    ``offsets`` is either a (k,) vector shared by all elements (sigma points)
    or an array of shape ``mean.shape + (k,)`` (Monte Carlo draws); ``weights``
    is a (k,) vector.  Returns a
    node of shape ``mean.shape + (2,)`` holding (mean, variance) with
    ``variance = var_scale * sum_k w_k (f_k - mean)^2``.  ``f`` and ``fprime``
    act on plain arrays.
    """
    mv, vv = value_of(mean), value_of(var)
    if np.any(vv < 0):
        raise DomainError("negative variance")
    w = np.asarray(weights, dtype=np.float64)
    std = np.sqrt(vv)
    pts = std[..., None] * offsets
    pts += mv[..., None]
    dev = f(pts)
    out_mean = dev @ w
    dev -= out_mean[..., None]
    out_var = var_scale * (np.square(dev) @ w)
    out = np.stack([out_mean, out_var], axis=-1)
    cache = {}

    def dpts(g):
        if "d" not in cache:
            gm, gv = g[..., 0], g[..., 1]
            d = dev * (2.0 * var_scale * gv)[..., None]
            d += gm[..., None]
            d *= w
            d *= fprime(pts)
            cache["d"] = d
        return cache.pop("d")

    # the two parents share one backward computation; the mean parent runs last
    def vjp_var(g):
        d = dpts(g)
        cache["d"] = d
        dstd = d @ offsets if np.ndim(offsets) == 1 else np.einsum("...k,...k->...", d, offsets)
        safe = np.where(std > 0, std, np.inf)
        return dstd / (2.0 * safe)

    def vjp_mean(g):
        return dpts(g).sum(axis=-1)

    return _make(out, (var, mean), (vjp_var, vjp_mean))


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "normal_cdf": normal_cdf,
    "normal_inv_cdf": normal_inv_cdf,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "leaky_relu": leaky_relu,
    "power": power,
    "min": minimum,
    "max": maximum,
    "neg": neg,
    "matmul": matmul,
    "sum": sum,
}


def record(op, *inputs, **kwargs):
    """Apply primitive ``op`` (by name) to ``inputs`` and return the result node."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise UsageError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


def check_shapes(params, grads):
    if set(params) != set(grads):
        raise ShapeError("gradient keys do not match parameter keys")
    for k in params:
        if np.shape(params[k]) != np.shape(grads[k]):
            raise ShapeError(f"gradient shape mismatch for {k!r}")

"""A small reverse-mode differentiation tape over numpy arrays.

Every :class:`Var` holds a float64 array (0-d for scalars). Operations on
``Var`` objects append a node to the owning :class:`Tape`; operations on
plain arrays fall through to numpy, so formulas written with the module-level
functions (``sqrt``, ``exp``, ``matmul`` ...) evaluate on either.

Complex quantities are carried as ``(re, im)`` pairs of real arrays; see
:func:`cmul`, :func:`cconj_matmul` and :func:`cabs2`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, GradCheckError, ShapeError, TapeError

ABS_EPS = 1e-12


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in evaluation order, so the list is already
    topologically sorted and the reverse sweep is a plain reversed loop.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.parents: list[tuple] = []
        self.kinds: list[str] = []

    def __len__(self):
        return len(self.values)

    def var(self, value) -> "Var":
        """Register a leaf (an input to differentiate with respect to)."""
        return self._push("leaf", np.array(value, dtype=float), ())

    def _push(self, kind, value, parents):
        self.values.append(value)
        self.parents.append(parents)
        self.kinds.append(kind)
        return Var(self, len(self.values) - 1)

    def record(self, kind: str, *inputs, **constants) -> "Var":
        """Append the primitive ``kind`` applied to ``inputs``."""
        try:
            fn = _PRIMITIVES[kind]
        except KeyError:
            raise TapeError(f"unknown primitive {kind!r}") from None
        for x in inputs:
            if isinstance(x, Var) and x.tape is not self:
                raise TapeError("inputs belong to a different tape")
        return fn(*inputs, **constants)

    def backward(self, output: "Var", seed=None) -> "Adjoints":
        """Reverse sweep from ``output``; returns adjoints for every node.

        Each call allocates a fresh adjoint buffer, so repeated calls give
        identical results.
        """
        if output.tape is not self:
            raise TapeError("output is not on this tape")
        adj: list = [None] * len(self.values)
        out_val = self.values[output.idx]
        adj[output.idx] = np.ones_like(out_val) if seed is None else np.asarray(seed, dtype=float)
        for i in range(output.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            for parent, vjp in self.parents[i]:
                contrib = vjp(g)
                if contrib is None:
                    continue
                j = parent.idx
                adj[j] = contrib if adj[j] is None else adj[j] + contrib
        return Adjoints(self, adj)


@dataclass
class Adjoints:
    tape: Tape
    buffer: list

    def __getitem__(self, v: "Var") -> np.ndarray:
        if v.tape is not self.tape:
            raise TapeError("variable belongs to a different tape")
        g = self.buffer[v.idx]
        if g is None:
            return np.zeros_like(self.tape.values[v.idx])
        return g

    def leaves(self) -> dict[int, np.ndarray]:
        return {
            i: self[Var(self.tape, i)]
            for i, k in enumerate(self.tape.kinds)
            if k == "leaf"
        }


class Var:
    __slots__ = ("tape", "idx")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

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
        return f"Var(idx={self.idx}, value={self.value!r})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("cannot mix variables from different tapes")
    return tape


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _binary(kind, a, b, fwd, ga, gb):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = fwd(av, bv)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(ga(g, av, bv, out), av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(gb(g, av, bv, out), bv.shape)))
    return tape._push(kind, out, tuple(parents))


def _unary(kind, x, fwd, gx):
    if not isinstance(x, Var):
        return fwd(np.asarray(x, dtype=float))
    xv = x.value
    out = fwd(xv)
    return x.tape._push(kind, out, ((x, lambda g: gx(g, xv, out)),))


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)


def mul(a, b):
    return _binary(
        "mul", a, b, np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a
    )


def div(a, b):
    return _binary(
        "div",
        a,
        b,
        np.divide,
        lambda g, a, b, o: g / b,
        lambda g, a, b, o: -g * o / b,
    )


def neg(x):
    return _unary("neg", x, np.negative, lambda g, x, o: -g)


def square(x):
    return _unary("square", x, np.square, lambda g, x, o: 2.0 * g * x)


def sqrt(x):
    if isinstance(x, Var) and np.any(x.value < 0):
        raise DomainError("sqrt of a negative value")
    return _unary("sqrt", x, np.sqrt, lambda g, x, o: 0.5 * g / o)


def log(x):
    if isinstance(x, Var) and np.any(x.value <= 0):
        raise DomainError("log of a non-positive value")
    return _unary("log", x, np.log, lambda g, x, o: g / x)


def exp(x):
    return _unary("exp", x, np.exp, lambda g, x, o: g * o)


def cos(x):
    return _unary("cos", x, np.cos, lambda g, x, o: -g * np.sin(x))


def sin(x):
    return _unary("sin", x, np.sin, lambda g, x, o: g * np.cos(x))


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def abs_(x):
    """|x| with the derivative smoothed to x / sqrt(x^2 + eps^2)."""
    return _unary(
        "abs", x, np.abs, lambda g, x, o: g * x / np.sqrt(x * x + ABS_EPS**2)
    )


def elu(x):
    def fwd(v):
        return np.where(v > 0, v, np.expm1(np.minimum(v, 0.0)))

    return _unary("elu", x, fwd, lambda g, x, o: g * np.where(x >= 0, 1.0, o + 1.0))


def relu(x):
    return _unary(
        "relu", x, lambda v: np.maximum(v, 0.0), lambda g, x, o: g * (x > 0)
    )


def clip(x, lo, hi):
    """Componentwise clamp; derivative 1 strictly inside, 0 on or past a bound."""
    return _unary(
        "clip",
        x,
        lambda v: np.clip(v, lo, hi),
        lambda g, x, o: g * ((x > lo) & (x < hi)),
    )


def stop_gradient(x):
    if not isinstance(x, Var):
        return np.asarray(x, dtype=float)
    return x.tape._push("stop", x.value, ())


def sum_(x, axis=None):
    if not isinstance(x, Var):
        return np.sum(np.asarray(x, dtype=float), axis=axis)
    xv = x.value
    out = np.asarray(np.sum(xv, axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return x.tape._push("sum", out, ((x, vjp),))


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul needs at least 1-d operands")
    out = np.matmul(av, bv)
    if tape is None:
        return out

    def ga(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv
        if av.ndim == 1:
            return bv @ g
        if bv.ndim == 1:
            return np.outer(g, bv)
        return g @ bv.T

    def gb(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * av
        if av.ndim == 1:
            return np.outer(av, g)
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    parents = []
    if isinstance(a, Var):
        parents.append((a, ga))
    if isinstance(b, Var):
        parents.append((b, gb))
    return tape._push("matmul", out, tuple(parents))


def dot(a, b):
    return matmul(a, b)


def getitem(x, idx):
    if not isinstance(x, Var):
        return np.asarray(x, dtype=float)[idx]
    xv = x.value
    out = np.asarray(xv[idx])

    def vjp(g):
        full = np.zeros_like(xv)
        np.add.at(full, idx, g)
        return full

    return x.tape._push("getitem", out, ((x, vjp),))


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(np.asarray(x, dtype=float), shape)
    xv = x.value
    return x.tape._push(
        "reshape", xv.reshape(shape), ((x, lambda g: g.reshape(xv.shape)),)
    )


def transpose(x):
    if not isinstance(x, Var):
        return np.asarray(x, dtype=float).T
    return x.tape._push("transpose", x.value.T, ((x, lambda g: g.T),))


def concatenate(xs: Sequence, axis=0):
    tape = _tape_of(*xs)
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    parents = []
    for k, x in enumerate(xs):
        if isinstance(x, Var):
            parents.append((x, lambda g, k=k: np.split(g, bounds, axis=axis)[k]))
    return tape._push("concatenate", out, tuple(parents))


def stack(xs: Sequence, axis=0):
    tape = _tape_of(*xs)
    vals = [_val(x) for x in xs]
    out = np.stack(vals, axis=axis)
    if tape is None:
        return out
    parents = []
    for k, x in enumerate(xs):
        if isinstance(x, Var):
            parents.append((x, lambda g, k=k: np.take(g, k, axis=axis)))
    return tape._push("stack", out, tuple(parents))


def value(x) -> np.ndarray:
    return _val(x)


_PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "sqrt": sqrt,
    "log": log,
    "exp": exp,
    "square": square,
    "abs": abs_,
    "tanh": tanh,
    "elu": elu,
    "relu": relu,
    "max0": relu,
    "sum": sum_,
    "dot": dot,
    "matmul": matmul,
    "cos": cos,
    "sin": sin,
    "clip": clip,
}


# -- complex numbers as (re, im) pairs --------------------------------------


def cmul(a, b):
    ar, ai = a
    br, bi = b
    return ar * br - ai * bi, ar * bi + ai * br


def cconj(a):
    return a[0], neg(a[1])


def cconj_matmul(a, b):
    """``a^H @ b`` for pair-valued matrices."""
    ar, ai = a
    br, bi = b
    return (
        matmul(transpose(ar), br) + matmul(transpose(ai), bi),
        matmul(transpose(ar), bi) - matmul(transpose(ai), br),
    )


def cmatmul(a, b):
    ar, ai = a
    br, bi = b
    return matmul(ar, br) - matmul(ai, bi), matmul(ar, bi) + matmul(ai, br)


def cabs2(a):
    return square(a[0]) + square(a[1])


def to_pair(z) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z)
    return np.ascontiguousarray(z.real, dtype=float), np.ascontiguousarray(z.imag, dtype=float)


def from_pair(pair) -> np.ndarray:
    return _val(pair[0]) + 1j * _val(pair[1])


# -- utilities --------------------------------------------------------------


def gradient(f: Callable, x0) -> tuple[float, np.ndarray]:
    """Value and gradient of scalar ``f`` at ``x0`` via one reverse sweep."""
    tape = Tape()
    x = tape.var(x0)
    out = f(x)
    if not isinstance(out, Var):
        return float(out), np.zeros_like(np.asarray(x0, dtype=float))
    if out.value.size != 1:
        raise ShapeError("gradient() needs a scalar output")
    adj = tape.backward(out)
    return float(out.value), adj[x]


@dataclass
class GradCheck:
    max_rel_err: float
    analytic: np.ndarray
    numeric: np.ndarray
    finite: bool = True

    @property
    def ok(self) -> bool:
        return self.finite


def grad_check(
    f: Callable,
    point,
    step: float = 1e-6,
    grad: Callable | None = None,
    floor: float = 1e-3,
) -> GradCheck:
    """Compare a gradient against central differences of ``f``.

    ``f`` must accept plain arrays (for the differences) and, unless
    ``grad`` is given, :class:`Var` inputs (for the tape gradient).
    Per-coordinate relative error uses ``max(|num_i|, floor * max|num|)`` as
    denominator so near-zero components do not dominate.
    """
    x0 = np.array(point, dtype=float)
    if grad is None:
        _, g = gradient(f, x0)
    else:
        g = np.asarray(grad(x0), dtype=float)
    num = np.zeros_like(x0)
    flat = num.reshape(-1)
    xf = x0.reshape(-1)
    for i in range(xf.size):
        xp = xf.copy()
        xm = xf.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(f(xp.reshape(x0.shape)))
        fm = float(f(xm.reshape(x0.shape)))
        flat[i] = (fp - fm) / (2.0 * step)
    if not (np.all(np.isfinite(num)) and np.all(np.isfinite(g))):
        return GradCheck(np.inf, g, num, finite=False)
    scale = max(np.max(np.abs(num)), np.max(np.abs(g)))
    denom = np.maximum(np.abs(num), floor * scale)
    denom = np.where(denom > 0, denom, 1.0)
    err = float(np.max(np.abs(g - num) / denom))
    return GradCheck(err, g, num)


def require_finite(check: GradCheck) -> GradCheck:
    if not check.finite:
        raise GradCheckError("non-finite value encountered during gradient check")
    return check


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam descent step. Returns ``(new_params, state)``."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"shape mismatch for parameter {k}: {p.shape} vs {g.shape}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        out.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return out, state

"""Minimal reverse-mode differentiation over numpy arrays.

A ``GradientTape`` records every operation applied to the variables it
watches.  Because nodes are appended in execution order, the tape is already
topologically sorted and the backward pass is a single reverse sweep.

    tape = GradientTape()
    w = tape.watch(np.ones(3))
    y = ad.sum(ad.exp(w * 2.0))
    (gw,) = tape.gradient(y, [w])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Var:
    __slots__ = ("value", "tape", "index")

    __array_priority__ = 100  # make ndarray <op> Var dispatch to Var

    def __init__(self, value, tape: "GradientTape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return np.shape(self.value)

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

    def __pow__(self, p):
        if p == 2:
            return square(self)
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Var(shape={self.shape})"


class GradientTape:
    """Records a computation graph and returns exact reverse-mode gradients."""

    def __init__(self):
        self._nodes: list[tuple[tuple[tuple[int, Callable], ...]]] = []

    def watch(self, value) -> Var:
        return self._record(np.array(value, dtype=float), ())

    def _record(self, value, parents) -> Var:
        self._nodes.append(parents)
        return Var(value, self, len(self._nodes) - 1)

    def gradient(self, y: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        if np.size(y.value) != 1:
            raise ValueError("gradient target must be a scalar")
        grads: dict[int, np.ndarray] = {y.index: np.ones_like(y.value)}
        for i in range(y.index, -1, -1):
            g = grads.get(i)
            if g is None:
                continue
            for parent, vjp in self._nodes[i]:
                contrib = vjp(g)
                if parent in grads:
                    grads[parent] = grads[parent] + contrib
                else:
                    grads[parent] = contrib
        return [grads.get(v.index, np.zeros_like(v.value)) for v in wrt]


# helpers -------------------------------------------------------------

def _val(a):
    return a.value if isinstance(a, Var) else np.asarray(a, dtype=float)


def _tape_of(*args) -> GradientTape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise ValueError("variables from different tapes")
            tape = a.tape
    return tape


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(value, *pairs):
    """pairs: (input, vjp) for each input that may carry gradient."""
    tape = _tape_of(*(p[0] for p in pairs))
    if tape is None:
        return value
    parents = tuple((a.index, fn) for a, fn in pairs if isinstance(a, Var))
    return tape._record(value, parents)


# primitives ----------------------------------------------------------

def constant(a):
    """Detach: the result carries no gradient."""
    return np.array(_val(a))


stop_gradient = constant


def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    return _make(out, (a, lambda g: _unbroadcast(g, np.shape(av))),
                 (b, lambda g: _unbroadcast(g, np.shape(bv))))


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    return _make(out, (a, lambda g: _unbroadcast(g, np.shape(av))),
                 (b, lambda g: -_unbroadcast(g, np.shape(bv))))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    return _make(out, (a, lambda g: _unbroadcast(g * bv, np.shape(av))),
                 (b, lambda g: _unbroadcast(g * av, np.shape(bv))))


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    return _make(out, (a, lambda g: _unbroadcast(g / bv, np.shape(av))),
                 (b, lambda g: _unbroadcast(-g * av / (bv * bv), np.shape(bv))))


def neg(a):
    return _make(-_val(a), (a, lambda g: -g))


def square(a):
    av = _val(a)
    return _make(av * av, (a, lambda g: 2.0 * av * g))


def power(a, p: float):
    av = _val(a)
    return _make(av**p, (a, lambda g: p * av ** (p - 1) * g))


def exp(a):
    out = np.exp(_val(a))
    return _make(out, (a, lambda g: g * out))


def log(a):
    av = _val(a)
    return _make(np.log(av), (a, lambda g: g / av))


def relu(a):
    av = _val(a)
    mask = av > 0
    return _make(np.where(mask, av, 0.0), (a, lambda g: g * mask))


def tanh(a):
    out = np.tanh(_val(a))
    return _make(out, (a, lambda g: g * (1.0 - out * out)))


def softplus(a):
    av = _val(a)
    out = np.logaddexp(0.0, av)
    return _make(out, (a, lambda g: g / (1.0 + np.exp(-av))))


def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = av @ bv

    def ga(g):
        if bv.ndim == 1:
            r = np.multiply.outer(g, bv)
        else:
            gg = g if av.ndim > 1 else g[..., None, :]
            r = gg @ np.swapaxes(bv, -1, -2)
            if av.ndim == 1:
                r = r[..., 0, :]
        return _unbroadcast(r, av.shape)

    def gb(g):
        if av.ndim == 1:
            r = np.multiply.outer(av, g) if bv.ndim > 1 else av * g
        elif bv.ndim == 1:
            r = np.einsum("...i,...->...i", av, g).reshape(-1, av.shape[-1]).sum(axis=0)
            return r
        else:
            r = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(r, bv.shape)

    return _make(out, (a, ga), (b, gb))


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001
    av = _val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _make(out, (a, vjp))


def mean(a, axis=None, keepdims: bool = False):
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape):
    av = _val(a)
    return _make(av.reshape(shape), (a, lambda g: np.reshape(g, av.shape)))


def getitem(a, key):
    av = _val(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, key, g)
        return out

    return _make(av[key], (a, vjp))


def concatenate(items, axis: int = -1):
    vals = [_val(v) for v in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    pairs = []
    for i, v in enumerate(items):
        lo, hi = bounds[i], bounds[i + 1]
        pairs.append((v, lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis)))
    return _make(out, *pairs)


def broadcast_to(a, shape):
    av = _val(a)
    return _make(np.broadcast_to(av, shape).copy(), (a, lambda g: _unbroadcast(g, av.shape)))


def logsumexp(a, axis: int = -1):
    av = _val(a)
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(av - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + m, axis=axis)

    def vjp(g):
        return np.expand_dims(g, axis) * (e / s)

    return _make(out, (a, vjp))


def logmeanexp(a, axis: int = -1):
    n = _val(a).shape[axis]
    return sub(logsumexp(a, axis=axis), float(np.log(n)))


def value_and_grad(fn: Callable, *params):
    """Evaluate ``fn(*vars)`` on a fresh tape and return (value, grads)."""
    tape = GradientTape()
    vs = [tape.watch(p) for p in params]
    out = fn(*vs)
    if not isinstance(out, Var):
        return float(np.asarray(out)), [np.zeros_like(np.asarray(p, dtype=float)) for p in params]
    return float(out.value), tape.gradient(out, vs)

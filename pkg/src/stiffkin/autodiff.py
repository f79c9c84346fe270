"""Reverse-mode differentiation over dense numpy arrays.

A :class:`Tape` records a computation as a sequence of primitive nodes
(add, mul, matmul, exp, ln, tanh, sum, indexing, linear solve, plus
registered custom operations). :func:`grad` evaluates a scalar loss and
returns exact reverse-mode derivatives with respect to a parameter set.
:func:`adjoint_implicit_solve` applies the implicit function theorem at a
converged nonlinear solve, so implicit integrators can backpropagate
without unrolling their inner Newton iterations.

Tapes are single-use, single-threaded objects; building independent tapes
concurrently is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` over axes that numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    vjp: Callable | None  # cotangent -> tuple of parent cotangents
    aux: dict = field(default_factory=dict)
    forward: Callable | None = None  # parent values -> value, for replay


class Var:
    """Handle to one tape node; supports numpy-style operator overloading."""

    __slots__ = ("tape", "idx")
    __array_ufunc__ = None  # force numpy to defer to our reflected operators

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def __array__(self, dtype=None):
        raise TypeError(
            "unsupported primitive: raw numpy calls cannot consume a tape Var"
        )

    def __repr__(self):
        return f"Var(idx={self.idx}, value={self.value!r})"

    # arithmetic
    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __neg__(self):
        return self.tape.neg(self)

    def __pow__(self, n):
        return self.tape.pow_int(self, n)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __rmatmul__(self, other):
        return self.tape.matmul(other, self)

    def __getitem__(self, index):
        return self.tape.select(self, index)

    # elementwise / reductions
    def exp(self):
        return self.tape.exp(self)

    def log(self):
        return self.tape.log(self)

    def tanh(self):
        return self.tape.tanh(self)

    def sum(self, axis=None):
        return self.tape.sum(self, axis=axis)

    def mean(self, axis=None):
        return self.tape.mean(self, axis=axis)


class Tape:
    """Ordered record of primitive operations with their forward values."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- construction -----------------------------------------------------

    def _node(self, op, parents, value, vjp, aux=None, forward=None) -> Var:
        self.nodes.append(
            Node(op, tuple(parents), np.asarray(value), vjp, aux or {}, forward)
        )
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> Var:
        return self._node("leaf", (), np.asarray(value, dtype=float), None)

    def _lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("variable belongs to a different tape")
            return x
        return self.leaf(x)

    # -- primitives -------------------------------------------------------

    def add(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        return self._node(
            "add",
            (a.idx, b.idx),
            av + bv,
            lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
            forward=lambda x, y: x + y,
        )

    def sub(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        return self._node(
            "sub",
            (a.idx, b.idx),
            av - bv,
            lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
            forward=lambda x, y: x - y,
        )

    def mul(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        return self._node(
            "mul",
            (a.idx, b.idx),
            av * bv,
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
            forward=lambda x, y: x * y,
        )

    def div(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        return self._node(
            "div",
            (a.idx, b.idx),
            av / bv,
            lambda g: (
                _unbroadcast(g / bv, av.shape),
                _unbroadcast(-g * av / (bv * bv), bv.shape),
            ),
            forward=lambda x, y: x / y,
        )

    def neg(self, a) -> Var:
        a = self._lift(a)
        return self._node(
            "neg", (a.idx,), -a.value, lambda g: (-g,), forward=lambda x: -x
        )

    def pow_int(self, a, n: int) -> Var:
        a = self._lift(a)
        if not isinstance(n, int):
            raise TypeError("only integer exponents are supported")
        av = a.value
        return self._node(
            "pow",
            (a.idx,),
            av**n,
            lambda g: (g * n * av ** (n - 1),),
            aux={"n": n},
            forward=lambda x: x**n,
        )

    def exp(self, a) -> Var:
        a = self._lift(a)
        v = np.exp(a.value)
        return self._node("exp", (a.idx,), v, lambda g: (g * v,), forward=np.exp)

    def log(self, a) -> Var:
        a = self._lift(a)
        av = a.value
        return self._node(
            "ln", (a.idx,), np.log(av), lambda g: (g / av,), forward=np.log
        )

    def tanh(self, a) -> Var:
        a = self._lift(a)
        v = np.tanh(a.value)
        return self._node(
            "tanh", (a.idx,), v, lambda g: (g * (1.0 - v * v),), forward=np.tanh
        )

    def matmul(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value

        def vjp(g):
            if av.ndim == 1 and bv.ndim == 1:  # inner product
                return g * bv, g * av
            if av.ndim == 1:  # (k,) @ (k,n)
                return g @ bv.T, np.outer(av, g)
            if bv.ndim == 1:  # (m,k) @ (k,)
                return np.outer(g, bv), av.T @ g
            return g @ bv.T, av.T @ g

        return self._node(
            "matmul", (a.idx, b.idx), av @ bv, vjp, forward=lambda x, y: x @ y
        )

    def sum(self, a, axis=None) -> Var:
        a = self._lift(a)
        av = a.value

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, av.shape).copy(),)
            g_exp = np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, av.shape).copy(),)

        return self._node(
            "sum",
            (a.idx,),
            av.sum(axis=axis),
            vjp,
            aux={"axis": axis},
            forward=lambda x: x.sum(axis=axis),
        )

    def mean(self, a, axis=None) -> Var:
        a = self._lift(a)
        av = a.value
        count = av.size if axis is None else av.shape[axis]

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g / count, av.shape).copy(),)
            g_exp = np.expand_dims(g / count, axis)
            return (np.broadcast_to(g_exp, av.shape).copy(),)

        return self._node(
            "mean",
            (a.idx,),
            av.mean(axis=axis),
            vjp,
            aux={"axis": axis},
            forward=lambda x: x.mean(axis=axis),
        )

    def select(self, a, index) -> Var:
        a = self._lift(a)
        av = a.value

        def vjp(g):
            out = np.zeros_like(av)
            np.add.at(out, index, g)
            return (out,)

        return self._node(
            "select",
            (a.idx,),
            av[index],
            vjp,
            aux={"index": index},
            forward=lambda x: x[index],
        )

    def linear_solve(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        x = np.linalg.solve(av, bv)

        def vjp(g):
            w = np.linalg.solve(av.T, g)
            if bv.ndim == 1:
                da = -np.outer(w, x)
            else:
                da = -w @ x.T
            return da, w

        return self._node(
            "linear_solve",
            (a.idx, b.idx),
            x,
            vjp,
            forward=lambda m, r: np.linalg.solve(m, r),
        )

    def custom(self, op, inputs, value, vjp, forward=None) -> Var:
        """Record an externally computed operation with its own VJP."""
        inputs = [self._lift(x) for x in inputs]
        return self._node(
            op, tuple(v.idx for v in inputs), value, vjp, forward=forward
        )

    # -- reverse pass -----------------------------------------------------

    def backward(self, out: Var, wrt: list[Var], seed=None) -> list[np.ndarray]:
        """Adjoints of `out` with respect to each Var in `wrt`.

        Accumulation follows fixed node order, so repeated backward passes
        over the same tape are bit-identical.
        """
        adj: list[np.ndarray | None] = [None] * len(self.nodes)
        adj[out.idx] = (
            np.ones_like(out.value) if seed is None else np.asarray(seed)
        )
        for i in range(out.idx, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if adj[parent] is None:
                    adj[parent] = np.zeros_like(self.nodes[parent].value)
                adj[parent] = adj[parent] + pg
        return [
            adj[v.idx]
            if adj[v.idx] is not None
            else np.zeros_like(self.nodes[v.idx].value)
            for v in wrt
        ]

    def replay(self) -> list[np.ndarray]:
        """Recompute every node value from the leaves, in recording order."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.forward is None:
                values.append(node.value)
            else:
                values.append(
                    np.asarray(node.forward(*(values[p] for p in node.parents)))
                )
        return values


def _wrap_params(tape: Tape, params):
    """Lift a parameter structure (array, dict, or sequence) onto the tape."""
    if isinstance(params, np.ndarray) or np.isscalar(params):
        leaf = tape.leaf(params)
        return leaf, [leaf], "array"
    if isinstance(params, dict):
        wrapped = {k: tape.leaf(v) for k, v in params.items()}
        return wrapped, list(wrapped.values()), "dict"
    if isinstance(params, (list, tuple)):
        wrapped = [tape.leaf(v) for v in params]
        return wrapped, wrapped, "list"
    raise TypeError(f"unsupported parameter structure {type(params)!r}")


def grad(loss_fn, params, frozen_mask=None):
    """Evaluate `loss_fn(params)` and its reverse-mode gradient.

    `params` may be a single array, a dict of arrays, or a sequence of
    arrays; the gradient mirrors that structure. `frozen_mask` (same
    structure, boolean) zeroes the matching gradient entries exactly.

    Raises ValueError if the loss is not a scalar.
    """
    tape = Tape()
    wrapped, leaves, kind = _wrap_params(tape, params)
    out = loss_fn(wrapped)
    if not isinstance(out, Var):
        raise ValueError("loss function must return a tape variable")
    if np.ndim(out.value) != 0:
        raise ValueError(f"loss must be scalar, got shape {out.value.shape}")
    grads = tape.backward(out, leaves)
    if frozen_mask is not None:
        masks = (
            [frozen_mask]
            if kind == "array"
            else list(frozen_mask.values())
            if kind == "dict"
            else list(frozen_mask)
        )
        grads = [
            np.where(np.asarray(m, dtype=bool), 0.0, g) if m is not None else g
            for g, m in zip(grads, masks)
        ]
    loss = float(out.value)
    if kind == "array":
        return loss, grads[0]
    if kind == "dict":
        return loss, dict(zip(params.keys(), grads))
    return loss, grads


def adjoint_implicit_solve(dF_dz, cotangent, param_vjp):
    """Implicit-function-theorem adjoint at a converged solve F(z*; p) = 0.

    Solves (dF/dz)^T w = cotangent and returns (param_adjoints, w) where
    param_adjoints = -(dF/dp)^T w, evaluated through `param_vjp(w)` which
    must return (dF/dp)^T w for each parameter array.

    Raises numpy.linalg.LinAlgError when the iteration matrix is singular.
    """
    dF_dz = np.asarray(dF_dz, dtype=float)
    cot = np.asarray(cotangent, dtype=float)
    if dF_dz.ndim == 0:
        w = cot / dF_dz
    else:
        w = np.linalg.solve(dF_dz.T, cot)
    raw = param_vjp(w)
    if isinstance(raw, (list, tuple)):
        adjoints = type(raw)(-np.asarray(r) for r in raw)
    elif isinstance(raw, dict):
        adjoints = {k: -np.asarray(v) for k, v in raw.items()}
    else:
        adjoints = -np.asarray(raw)
    return adjoints, w

"""Tape-free reverse-mode autodiff over the kernels in :mod:`functional`.

A :class:`Var` keeps its parents and a closure that pushes the upstream
gradient into them. ``Var.backward`` walks the graph in reverse topological
order. Only the ops the networks in this package need are provided.
"""
from __future__ import annotations

import contextlib
from contextvars import ContextVar
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from ..errors import DimensionError

_mac_counter: ContextVar[list | None] = ContextVar("_mac_counter", default=None)


@contextlib.contextmanager
def count_macs():
    """Collect (name, macs) for every conv evaluated inside the block."""
    records: list = []
    token = _mac_counter.set(records)
    try:
        yield records
    finally:
        _mac_counter.reset(token)


class Var:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents: Sequence["Var"] = (), backward_fn: Callable | None = None,
                 requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(shape={self.data.shape}, name={self.name!r})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Var] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    # Arithmetic sugar keeps model code readable.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _const(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _push(v: Var, g):
    if v.requires_grad:
        v._accumulate(g)


def conv2d(x: Var, w: Var, b: Var | None, spec: F.ConvSpec) -> Var:
    out = F.conv2d(x.data, spec, w.data, None if b is None else b.data)
    records = _mac_counter.get()
    if records is not None:
        records.append((w.name, spec.macs(*x.data.shape[2:]) * x.data.shape[0]))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx, gw, gb = F.conv2d_backward(x.data, spec, w.data, g)
        _push(x, gx)
        _push(w, gw)
        if b is not None:
            _push(b, gb)

    return Var(out, parents, backward)


def add(a, b) -> Var:
    a, b = _const(a), _const(b)
    out = a.data + b.data

    def backward(g):
        _push(a, _unbroadcast(g, a.data.shape))
        _push(b, _unbroadcast(g, b.data.shape))

    return Var(F.check_finite(out, "add"), (a, b), backward)


def add_n(xs: Sequence[Var]) -> Var:
    out = xs[0]
    for x in xs[1:]:
        out = add(out, x)
    return out


def mul(a, b) -> Var:
    a, b = _const(a), _const(b)
    out = a.data * b.data

    def backward(g):
        _push(a, _unbroadcast(g * b.data, a.data.shape))
        _push(b, _unbroadcast(g * a.data, b.data.shape))

    return Var(F.check_finite(out, "mul"), (a, b), backward)


def scale(x: Var, c: float) -> Var:
    return Var(x.data * c, (x,), lambda g: _push(x, g * c))


def channel_affine(x: Var, gamma: Var, beta: Var) -> Var:
    """Per-channel scale and shift: the frozen-statistics normalisation."""
    ga = gamma.data[None, :, None, None]
    out = x.data * ga + beta.data[None, :, None, None]

    def backward(g):
        _push(x, g * ga)
        _push(gamma, (g * x.data).sum(axis=(0, 2, 3)))
        _push(beta, g.sum(axis=(0, 2, 3)))

    return Var(F.check_finite(out, "channel_affine"), (x, gamma, beta), backward)


def silu(x: Var) -> Var:
    return Var(F.silu(x.data), (x,), lambda g: _push(x, F.silu_backward(x.data, g)))


def sigmoid(x: Var) -> Var:
    y = F.sigmoid(x.data)
    return Var(y, (x,), lambda g: _push(x, g * y * (1 - y)))


def gap(x: Var) -> Var:
    shape = x.data.shape
    return Var(F.gap(x.data), (x,), lambda g: _push(x, F.gap_backward(shape, g)))


def linear(x: Var, w: Var, b: Var | None) -> Var:
    """(N, in) @ w.T + b with w shaped (out, in)."""
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        _push(x, g @ w.data)
        _push(w, g.T @ x.data)
        if b is not None:
            _push(b, g.sum(axis=0))

    return Var(F.check_finite(out, "linear"), parents, backward)


def softmax(x: Var, axis: int = -1) -> Var:
    y = F.softmax(x.data, axis=axis)
    return Var(y, (x,), lambda g: _push(x, F.softmax_backward(y, g, axis=axis)))


def stack(xs: Sequence[Var], axis: int = 0) -> Var:
    out = np.stack([x.data for x in xs], axis=axis)

    def backward(g):
        for k, x in enumerate(xs):
            _push(x, np.take(g, k, axis=axis))

    return Var(out, tuple(xs), backward)


def index(x: Var, k: int, axis: int = 0) -> Var:
    def backward(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = k
        full[tuple(sl)] = g
        _push(x, full)

    return Var(np.take(x.data, k, axis=axis), (x,), backward)


def expand_hw(x: Var) -> Var:
    """(N, C) -> (N, C, 1, 1)."""
    return Var(x.data[:, :, None, None], (x,), lambda g: _push(x, g[:, :, 0, 0]))


def concat_channels(xs: Sequence[Var]) -> Var:
    out = F.concat_channels([x.data for x in xs])
    bounds = np.cumsum([0] + [x.data.shape[1] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            _push(x, g[:, lo:hi])

    return Var(out, tuple(xs), backward)


def split_channels(x: Var, parts: int) -> list[Var]:
    pieces = F.split_channels(x.data, parts)
    step = pieces[0].shape[1]
    outs = []
    for k, piece in enumerate(pieces):
        lo = k * step

        def backward(g, lo=lo):
            full = np.zeros_like(x.data)
            full[:, lo : lo + step] = g
            _push(x, full)

        outs.append(Var(piece, (x,), backward))
    return outs


def upsample_nearest(x: Var, factor: int) -> Var:
    if factor == 1:
        return x
    return Var(F.upsample_nearest(x.data, factor), (x,),
               lambda g: _push(x, F.upsample_nearest_backward(g, factor)))


def subsample(x: Var, factor: int) -> Var:
    """Nearest downsampling: keep every ``factor``-th row and column."""
    if factor == 1:
        return x

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, :, ::factor, ::factor] = g
        _push(x, full)

    return Var(x.data[:, :, ::factor, ::factor].copy(), (x,), backward)


def total(x: Var) -> Var:
    return Var(np.asarray(x.data.sum()), (x,), lambda g: _push(x, np.broadcast_to(g, x.data.shape)))


def zeros_like(x: Var) -> Var:
    return Var(np.zeros_like(x.data))


def check_same_shape(xs: Sequence[Var], what: str):
    ref = xs[0].data.shape
    for x in xs[1:]:
        if x.data.shape != ref:
            raise DimensionError(f"{what}: shape {x.data.shape} differs from {ref}")

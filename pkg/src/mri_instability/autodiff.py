"""Tape-based reverse-mode differentiation over numpy arrays.

Values may be real or complex.  For a real scalar loss ``L`` and a complex
node ``z = u + i v`` the stored gradient is ``dL/du + i dL/dv``, i.e. complex
tensors are differentiated as pairs of real tensors.  Under this convention
the vector-Jacobian product of a complex-linear map ``F`` is ``F^H g``, so the
backward pass of the unitary FFT is the inverse FFT.

Usage::

    tape = Tape()
    w = tape.leaf(w0, requires_grad=True)
    loss = l2_squared(sub(w, target))
    backward(tape, loss)
    w.grad

A tape may be differentiated once; build a fresh tape for every evaluation.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np

from .errors import GradientError, ShapeMismatchError
from .tensor_core import fft2, ifft2


class Node:
    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "_vjp", "_tape", "is_leaf")

    def __init__(self, value, op, parents=(), vjp=None, tape=None, requires_grad=False, is_leaf=False):
        self.value = value
        self.op = op
        self.parents = parents
        self._vjp = vjp
        # weak so that tape -> nodes is the only direction and no cycle forms
        self._tape = weakref.ref(tape) if tape is not None else None
        self.grad = None
        self.requires_grad = requires_grad
        self.is_leaf = is_leaf

    @property
    def tape(self):
        return self._tape() if self._tape is not None else None

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(other, self)
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(-1.0, self)


class Tape:
    """Creation-ordered record of nodes; creation order is a topological order."""

    def __init__(self):
        self.nodes = []
        self.backward_done = False

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad=False, name="leaf") -> Node:
        value = np.asarray(value)
        if not (np.iscomplexobj(value) or value.dtype == np.float64):
            value = value.astype(np.float64)
        node = Node(value, name, (), None, self, requires_grad, is_leaf=True)
        self.nodes.append(node)
        return node

    def record(self, value, op, parents, vjp) -> Node:
        live = [p for p in parents if isinstance(p, Node)]
        for p in live:
            if p.tape is not self:
                raise GradientError(f"{op}: operand belongs to a different tape")
        requires = any(p.requires_grad for p in live)
        node = Node(value, op, tuple(parents), vjp, self, requires)
        self.nodes.append(node)
        return node


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise GradientError("at least one operand must be a Node")


def _val(a):
    return a.value if isinstance(a, Node) else np.asarray(a)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError as exc:
        raise ShapeMismatchError(f"{op}: shapes {np.shape(a)} and {np.shape(b)} do not broadcast") from exc


# ---------------------------------------------------------------- linear ops

def add(a, b) -> Node:
    va, vb = _val(a), _val(b)
    _check_broadcast("add", va, vb)
    sa, sb = va.shape, vb.shape
    return _tape_of(a, b).record(va + vb, "add", (a, b),
                                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    va, vb = _val(a), _val(b)
    _check_broadcast("sub", va, vb)
    sa, sb = va.shape, vb.shape
    return _tape_of(a, b).record(va - vb, "sub", (a, b),
                                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scalar_mul(c, a) -> Node:
    if not np.isscalar(c):
        raise ShapeMismatchError("scalar_mul expects a python/numpy scalar")
    cc = np.conj(c)
    return _tape_of(a).record(c * _val(a), "scalar_mul", (a,), lambda g: (cc * g,))


def elementwise_mul(a, b) -> Node:
    va, vb = _val(a), _val(b)
    _check_broadcast("elementwise_mul", va, vb)
    sa, sb = va.shape, vb.shape
    return _tape_of(a, b).record(
        va * vb, "elementwise_mul", (a, b),
        lambda g: (_unbroadcast(g * np.conj(vb), sa), _unbroadcast(g * np.conj(va), sb)))


def mask_mul(x, mask) -> Node:
    """Multiply by a constant real 0/1 sampling mask."""
    m = np.asarray(mask, dtype=np.float64)
    vx = _val(x)
    _check_broadcast("mask_mul", vx, m)
    sx = vx.shape
    return _tape_of(x).record(vx * m, "mask_mul", (x,), lambda g: (_unbroadcast(g * m, sx),))


def fft2_lin(x) -> Node:
    return _tape_of(x).record(fft2(_val(x)), "fft2", (x,), lambda g: (ifft2(g),))


def ifft2_lin(x) -> Node:
    return _tape_of(x).record(ifft2(_val(x)), "ifft2", (x,), lambda g: (fft2(g),))


def real_part(x) -> Node:
    return _tape_of(x).record(np.real(_val(x)).copy(), "real", (x,), lambda g: (np.real(g),))


def reshape(x, shape) -> Node:
    old = _val(x).shape
    return _tape_of(x).record(_val(x).reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def concat(xs, axis=-1) -> Node:
    vals = [_val(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _tape_of(*xs).record(np.concatenate(vals, axis=axis), "concat", tuple(xs),
                                lambda g: tuple(np.split(g, sizes, axis=axis)))


# ------------------------------------------------------------ nonlinear ops

def leaky_relu(x, slope=0.1) -> Node:
    vx = _val(x)
    if np.iscomplexobj(vx):
        raise ShapeMismatchError("leaky_relu is defined for real tensors only")
    scale = np.where(vx > 0, 1.0, slope)
    return _tape_of(x).record(vx * scale, "leaky_relu", (x,), lambda g: (g * scale,))


def conv2d(x, w, b=None) -> Node:
    """Same-padded, stride-1 2-D convolution (cross-correlation), NHWC layout.

    ``x``: ``(batch, H, W, C_in)``; ``w``: ``(k, k, C_in, C_out)`` with odd
    ``k``; ``b``: ``(C_out,)`` or ``None``.
    """
    vx, vw = _val(x), _val(w)
    if vx.ndim != 4 or vw.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects 4-D input and kernel, got {vx.shape}, {vw.shape}")
    k = vw.shape[0]
    if vw.shape[1] != k or k % 2 != 1:
        raise ShapeMismatchError(f"conv2d kernel must be square and odd, got {vw.shape[:2]}")
    if vw.shape[2] != vx.shape[3]:
        raise ShapeMismatchError(f"conv2d: input has {vx.shape[3]} channels, kernel expects {vw.shape[2]}")
    bsz, h, wd, cin = vx.shape
    cout = vw.shape[3]
    p = k // 2
    xp = np.pad(vx, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros((bsz, h, wd, cout))
    for i in range(k):
        for j in range(k):
            out += xp[:, i:i + h, j:j + wd, :] @ vw[i, j]
    parents = [x, w]
    if b is not None:
        vb = _val(b)
        if vb.shape != (cout,):
            raise ShapeMismatchError(f"conv2d bias shape {vb.shape} != ({cout},)")
        out += vb
        parents.append(b)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(vw)
        g2 = g.reshape(-1, cout)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + h, j:j + wd, :] += g @ vw[i, j].T
                gw[i, j] = xp[:, i:i + h, j:j + wd, :].reshape(-1, cin).T @ g2
        grads = [gxp[:, p:p + h, p:p + wd, :], gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _tape_of(x, w).record(out, "conv2d", tuple(parents), vjp)


# -------------------------------------------------------------- reductions

def sum_all(x) -> Node:
    vx = _val(x)
    shape = vx.shape
    return _tape_of(x).record(np.sum(vx), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def l2_squared(x) -> Node:
    """Sum of squared magnitudes over every real and imaginary component."""
    vx = _val(x)
    val = np.sum(vx.real**2 + vx.imag**2) if np.iscomplexobj(vx) else np.sum(vx * vx)
    return _tape_of(x).record(np.float64(val), "l2_squared", (x,), lambda g: (2.0 * g * vx,))


def batch_l2_squared(x) -> Node:
    """Per-item squared norm over all but the leading axis."""
    vx = _val(x)
    axes = tuple(range(1, vx.ndim))
    val = np.sum(np.abs(vx) ** 2, axis=axes)
    expand = (slice(None),) + (None,) * len(axes)
    return _tape_of(x).record(val, "batch_l2_squared", (x,), lambda g: (2.0 * g[expand] * vx,))


def mse(a, b) -> Node:
    """Mean of squared magnitudes of ``a - b``."""
    va, vb = _val(a), _val(b)
    if va.shape != vb.shape:
        raise ShapeMismatchError(f"mse: shapes {va.shape} and {vb.shape} differ")
    d = va - vb
    n = d.size
    val = np.sum(np.abs(d) ** 2) / n
    return _tape_of(a, b).record(np.float64(val), "mse", (a, b),
                                 lambda g: (2.0 * g * d / n, -2.0 * g * d / n))


# ---------------------------------------------------------------- backward

def backward(tape: Tape, loss: Node) -> None:
    """Populate ``.grad`` on every leaf created with ``requires_grad=True``.

    Raises :class:`GradientError` for a non-scalar loss or a second call on
    the same tape.
    """
    if tape.backward_done:
        raise GradientError("backward already ran on this tape; record a new tape")
    if loss.tape is not tape:
        raise GradientError("loss node does not belong to this tape")
    if np.ndim(loss.value) != 0:
        raise GradientError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    if np.iscomplexobj(loss.value):
        raise GradientError("loss must be real")
    tape.backward_done = True
    grads = {id(loss): np.float64(1.0)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        pgrads = node._vjp(g)
        for parent, pg in zip(node.parents, pgrads):
            if not isinstance(parent, Node) or not parent.requires_grad:
                continue
            if not np.iscomplexobj(parent.value) and np.iscomplexobj(pg):
                pg = pg.real
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in tape.nodes:
        if node.is_leaf and node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.value)


# -------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


@dataclass
class Adam:
    """Adam with bias correction; ``eps_hat`` is added to the root of the second moment."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    state: AdamState | None = field(default=None, repr=False)

    def step(self, params, grads):
        if self.state is None:
            self.state = AdamState.zeros_like(params)
        new, self.state = adam_update(params, grads, self.state, self.lr, self.beta1,
                                      self.beta2, self.eps_hat)
        return new


def adam_update(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps_hat=1e-8):
    """One Adam step; returns ``(new_params, new_state)`` without mutating inputs."""
    t = state.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_params, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"adam: param {p.shape} vs grad {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_params.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps_hat))
        ms.append(m)
        vs.append(v)
    return new_params, AdamState(ms, vs, t)

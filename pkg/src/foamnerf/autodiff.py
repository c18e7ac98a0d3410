"""Tape-based reverse-mode differentiation over numpy arrays.

Every primitive here mirrors numpy semantics on plain arrays and records
onto a Tape when any argument is a Var.  Model code written against these
functions therefore runs identically with or without gradient tracking,
and forward values are bit-identical in both modes (same numpy calls).

The tape is a flat list of Vars in execution order; backward() walks it
once in reverse, accumulating adjoints.  Arrays are float64 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "NonFiniteValueError",
    "GradCheckReport",
    "evaluate",
    "gradient",
    "value_and_gradient",
    "check_gradient",
    "backward",
]


class NonFiniteValueError(ArithmeticError):
    """A primitive produced NaN or infinity during a checked evaluation."""

    def __init__(self, primitive: str):
        super().__init__(f"non-finite value produced by primitive '{primitive}'")
        self.primitive = primitive


class Tape:
    """Execution-ordered record of primitive applications."""

    __slots__ = ("nodes", "check_finite")

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Var] = []
        self.check_finite = check_finite


class Var:
    """A value on a tape plus the plumbing needed for one backward pass."""

    __slots__ = ("value", "tape", "parents", "vjps", "op", "grad")

    def __init__(self, value, tape: Tape, parents=(), vjps=(), op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.vjps = vjps
        self.op = op
        self.grad = None
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"

    # arithmetic operators; reflected forms cover ndarray-on-the-left because
    # ndarray returns NotImplemented for unknown operand types only when the
    # Var is not array-like, so always put Var logic in these methods
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _lift(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _record(tape, value, parents, vjps, op):
    if tape.check_finite and not np.all(np.isfinite(value)):
        raise NonFiniteValueError(op)
    return Var(value, tape, tuple(parents), tuple(vjps), op)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = _lift(a), _lift(b)
    out = av + bv
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g, av.shape))
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(g, bv.shape))
    return _record(tape, out, parents, vjps, "add")


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = _lift(a), _lift(b)
    out = av - bv
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g, av.shape))
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(-g, bv.shape))
    return _record(tape, out, parents, vjps, "sub")


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _lift(a), _lift(b)
    out = av * bv
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g * bv, av.shape))
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(g * av, bv.shape))
    return _record(tape, out, parents, vjps, "mul")


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = _lift(a), _lift(b)
    out = av / bv
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g / bv, av.shape))
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape))
    return _record(tape, out, parents, vjps, "div")


def neg(a):
    if not isinstance(a, Var):
        return -np.asarray(a, dtype=np.float64)
    return _record(a.tape, -a.value, (a,), (lambda g: -g,), "neg")


def power(a, p):
    """Elementwise a**p for a constant real exponent p."""
    p = float(p)
    av = _lift(a)
    out = av**p
    if not isinstance(a, Var):
        return out
    return _record(a.tape, out, (a,), (lambda g: g * p * av ** (p - 1.0),), "power")


# ---------------------------------------------------------------------------
# transcendental primitives


def _unary(a, fn, dfn, name):
    av = _lift(a)
    out = fn(av)
    if not isinstance(a, Var):
        return out
    return _record(a.tape, out, (a,), (lambda g: g * dfn(av, out),), name)


def sin(a):
    return _unary(a, np.sin, lambda x, y: np.cos(x), "sin")


def cos(a):
    return _unary(a, np.cos, lambda x, y: -np.sin(x), "cos")


def exp(a):
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def _sigmoid_np(x):
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _unary(a, _sigmoid_np, lambda x, y: y * (1.0 - y), "sigmoid")


def softplus(a):
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid_np(x), "softplus")


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0.0).astype(np.float64), "relu")


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    av, bv = _lift(a), _lift(b)
    a1, b1 = av.ndim == 1, bv.ndim == 1
    if a1:
        a = reshape(a, (1, av.shape[0]))
    if b1:
        b = reshape(b, (bv.shape[0], 1))
    out = _matmul2(a, b)
    if a1 and b1:
        return reshape(out, ())
    if a1:
        return reshape(out, _lift(out).shape[:-2] + (_lift(out).shape[-1],))
    if b1:
        return reshape(out, _lift(out).shape[:-1])
    return out


def _matmul2(a, b):
    tape = _tape_of(a, b)
    av, bv = _lift(a), _lift(b)
    out = np.matmul(av, bv)
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(np.matmul(g, bv.swapaxes(-1, -2)), av.shape))
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(np.matmul(av.swapaxes(-1, -2), g), bv.shape))
    return _record(tape, out, parents, vjps, "matmul")


def sum(a, axis=None, keepdims=False):  # noqa: A001 - numpy-style name
    av = _lift(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape)

    return _record(a.tape, out, (a,), (vjp,), "sum")


def cumsum(a, axis=-1):
    av = _lift(a)
    out = np.cumsum(av, axis=axis)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)

    return _record(a.tape, out, (a,), (vjp,), "cumsum")


def reshape(a, shape):
    av = _lift(a)
    out = np.reshape(av, shape)
    if not isinstance(a, Var):
        return out
    return _record(a.tape, out, (a,), (lambda g: np.reshape(g, av.shape),), "reshape")


def concatenate(parts, axis=-1):
    tape = _tape_of(*parts)
    values = [_lift(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    if tape is None:
        return out
    ax = axis if axis >= 0 else out.ndim + axis
    offsets = np.cumsum([0] + [v.shape[ax] for v in values])
    parents, vjps = [], []
    for i, p in enumerate(parts):
        if not isinstance(p, Var):
            continue
        lo, hi = offsets[i], offsets[i + 1]
        idx = (slice(None),) * ax + (slice(lo, hi),)

        def vjp(g, idx=idx):
            return g[idx]

        parents.append(p)
        vjps.append(vjp)
    return _record(tape, out, parents, vjps, "concatenate")


def slice_last(a, start, stop):
    """a[..., start:stop]."""
    av = _lift(a)
    out = av[..., start:stop]
    if not isinstance(a, Var):
        return out

    def vjp(g):
        full = np.zeros(av.shape)
        full[..., start:stop] = g
        return full

    return _record(a.tape, out, (a,), (vjp,), "slice")


def permute_last(a, perm):
    """Reorder the last axis by a permutation (bijective index array)."""
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    av = _lift(a)
    out = av[..., perm]
    if not isinstance(a, Var):
        return out
    return _record(a.tape, out, (a,), (lambda g: g[..., inv],), "permute")


def conv2d(x, kernel, size, stride, pad):
    """2-D convolution, channels-last.

    x: (B, H, W, Cin); kernel: (size*size*Cin, Cout) with taps ordered
    (row, col, channel).  Zero padding `pad` on both spatial axes.
    """
    xv, kv = _lift(x), _lift(kernel)
    b, h, w, cin = xv.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - size) // stride + 1
    wo = (wp - size) // stride + 1
    flat = _im2col_indices(h, w, size, stride, pad)
    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = xp.reshape(b, hp * wp, cin)[:, flat, :].reshape(b, ho * wo, size * size * cin)
    out = np.matmul(cols, kv).reshape(b, ho, wo, kv.shape[1])
    tape = _tape_of(x, kernel)
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(x, Var):

        def vjp_x(g):
            gc = np.matmul(g.reshape(b, ho * wo, -1), kv.T)
            gc = gc.reshape(b, ho * wo * size * size, cin).transpose(1, 0, 2)
            gz = np.zeros((hp * wp, b, cin))
            np.add.at(gz, flat, gc)
            gz = gz.transpose(1, 0, 2).reshape(b, hp, wp, cin)
            return gz[:, pad : pad + h, pad : pad + w, :]

        parents.append(x)
        vjps.append(vjp_x)
    if isinstance(kernel, Var):

        def vjp_k(g):
            return np.tensordot(cols, g.reshape(b, ho * wo, -1), axes=([0, 1], [0, 1]))

        parents.append(kernel)
        vjps.append(vjp_k)
    return _record(tape, out, parents, vjps, "conv2d")


_IM2COL_CACHE: dict = {}


def _im2col_indices(h, w, size, stride, pad):
    key = (h, w, size, stride, pad)
    cached = _IM2COL_CACHE.get(key)
    if cached is not None:
        return cached
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - size) // stride + 1
    wo = (wp - size) // stride + 1
    r0 = np.arange(ho) * stride
    c0 = np.arange(wo) * stride
    rows = r0[:, None, None, None] + np.arange(size)[None, None, :, None]
    cols = c0[None, :, None, None] + np.arange(size)[None, None, None, :]
    flat = (rows * wp + cols).reshape(-1)
    _IM2COL_CACHE[key] = flat
    return flat


# ---------------------------------------------------------------------------
# backward pass and entry points


def backward(output: Var):
    """Seed `output` (a scalar) with adjoint 1 and accumulate into the tape."""
    if output.value.size != 1:
        raise ValueError("backward requires a scalar output")
    tape = output.tape
    for node in tape.nodes:
        node.grad = None
    output.grad = np.ones_like(output.value)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


def evaluate(fn, params):
    """Run fn at params (flat array) and return its scalar value."""
    tape = Tape(check_finite=True)
    leaf = Var(np.asarray(params, dtype=np.float64), tape)
    out = fn(leaf)
    if not isinstance(out, Var):
        return float(np.asarray(out))
    if out.value.size != 1:
        raise ValueError("fn must return a scalar")
    return float(out.value)


def gradient(fn, params):
    """Gradient of a scalar fn with respect to its flat parameter vector."""
    return value_and_gradient(fn, params)[1]


def value_and_gradient(fn, params, check_finite=True):
    params = np.asarray(params, dtype=np.float64)
    tape = Tape(check_finite=check_finite)
    leaf = Var(params, tape)
    out = fn(leaf)
    if not isinstance(out, Var):
        # fn ignored its input; the gradient is exactly zero
        return float(np.asarray(out)), np.zeros_like(params)
    if out.value.size != 1:
        raise ValueError("fn must return a scalar")
    backward(out)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(params)
    value = float(out.value)
    # tape <-> Var cycles otherwise wait for the gc; drop the graph now
    tape.nodes.clear()
    return value, grad


@dataclass(frozen=True)
class GradCheckReport:
    """Worst-coordinate comparison of analytic vs central-difference gradients."""

    max_rel_error: float
    argmax_index: int
    fd_step: float

    def __bool__(self):
        return bool(np.isfinite(self.max_rel_error))


def check_gradient(fn, params, fd_step=1e-5):
    """Compare the tape gradient against central finite differences.

    Relative error per coordinate is |a - f| / max(|a|, |f|, 1e-8); the
    report carries the worst coordinate.
    """
    params = np.asarray(params, dtype=np.float64)
    analytic = gradient(fn, params)
    worst = 0.0
    worst_i = 0
    flat = params.ravel()
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + fd_step
        hi = float(np.asarray(fn(bumped.reshape(params.shape))))
        bumped[i] = flat[i] - fd_step
        lo = float(np.asarray(fn(bumped.reshape(params.shape))))
        fd[i] = (hi - lo) / (2.0 * fd_step)
    a = analytic.ravel()
    for i in range(flat.size):
        err = abs(a[i] - fd[i]) / max(abs(a[i]), abs(fd[i]), 1e-8)
        if err > worst:
            worst = err
            worst_i = i
    return GradCheckReport(max_rel_error=worst, argmax_index=worst_i, fd_step=fd_step)

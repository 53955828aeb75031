"""Dense float64 tensors with tape-based reverse-mode differentiation.

The operation set is deliberately small: matmul, add, sub, mul, exp, log,
tanh, softplus, lgamma, sum, mean, slice, concat, scalar scale, reshape.
Every network and log-density in this package is built from these, so a
single gradient path covers policies, surrogate losses and KL estimates.

Usage::

    with Tape() as tape:
        theta = tape.leaf(vector)          # (p,) parameter leaf
        loss = mean(mul(theta, theta))
        g = tape.gradient(loss, theta)     # (p,) ndarray

Outside a ``Tape`` context the same functions run as plain numpy forward
evaluation, which keeps sampling and line-search evaluations cheap.

Tapes are first-order only: Fisher-vector products elsewhere in the package
finite-difference the KL gradient instead of requiring a second-order tape.
Each thread has its own active-tape stack, so independent tapes may run
concurrently; a single tape must not be shared across threads.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy import special as _sp

from .errors import ContractError, DomainError, NumericError, ShapeError

# Toggle for the per-op finiteness sweep. NaN/Inf must surface as an error,
# never flow silently into a policy update.
CHECK_FINITE = True

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; replaying it backwards yields gradients.

    Nodes are appended in execution order, so operands always precede their
    consumers and the backward pass is a single reverse sweep that visits
    each node exactly once.
    """

    def __init__(self):
        self.nodes = []  # (out_slot, ((in_slot, vjp), ...))
        self.n_slots = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def _new_slot(self):
        slot = self.n_slots
        self.n_slots += 1
        return slot

    def leaf(self, data) -> "Tensor":
        """Register ``data`` as a differentiable leaf on this tape."""
        arr = np.asarray(data, dtype=np.float64)
        return Tensor(arr, slot=self._new_slot())

    def _record(self, out_data, inputs):
        """inputs: iterable of (Tensor, vjp) pairs; constants are skipped."""
        tracked = tuple((t.slot, vjp) for t, vjp in inputs if t.slot is not None)
        out = Tensor(out_data, slot=self._new_slot() if tracked else None)
        if tracked:
            self.nodes.append((out.slot, tracked))
        return out

    def gradient(self, output: "Tensor", wrt: "Tensor") -> np.ndarray:
        """d(output)/d(wrt) for a scalar output; zeros if wrt is unused."""
        if output.data.size != 1:
            raise ContractError(
                f"gradient requires a scalar output, got shape {output.data.shape}"
            )
        if wrt.slot is None:
            raise ContractError("gradient target is not a leaf on this tape")
        adjoints: list = [None] * self.n_slots
        if output.slot is not None:
            adjoints[output.slot] = np.ones_like(output.data)
            for out_slot, inputs in reversed(self.nodes):
                g = adjoints[out_slot]
                if g is None:
                    continue
                for in_slot, vjp in inputs:
                    contrib = vjp(g)
                    if adjoints[in_slot] is None:
                        adjoints[in_slot] = contrib
                    else:
                        adjoints[in_slot] = adjoints[in_slot] + contrib
        g = adjoints[wrt.slot]
        if g is None:
            return np.zeros_like(wrt.data)
        return np.asarray(g, dtype=np.float64).reshape(wrt.data.shape)


class Tensor:
    """A float64 array plus (optionally) its slot on the active tape."""

    __slots__ = ("data", "slot")

    def __init__(self, data, slot=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.slot = slot

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = "" if self.slot is None else f", slot={self.slot}"
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; constants are auto-wrapped
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    return as_tensor(x)


def stop_gradient(x: Tensor) -> Tensor:
    """Value of x detached from the tape."""
    return Tensor(x.data)


def _quiet():
    # overflow/invalid are detected by the finiteness sweep and raised as
    # NumericError; numpy's own warnings would just be noise on top
    return np.errstate(over="ignore", invalid="ignore", divide="ignore")


def _check_out(name, data):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{name}'")
    return data


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _elementwise_binary(name, a, b, fwd, dfa, dfb):
    a, b = as_tensor(a), as_tensor(b)
    try:
        with _quiet():
            out = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"'{name}' operands {a.shape} and {b.shape}: {e}") from None
    _check_out(name, out)
    tape = _active_tape()
    if tape is None:
        return Tensor(out)
    ash, bsh = a.data.shape, b.data.shape
    ad, bd = a.data, b.data
    return tape._record(
        out,
        (
            (a, lambda g: _unbroadcast(dfa(g, ad, bd), ash)),
            (b, lambda g: _unbroadcast(dfb(g, ad, bd), bsh)),
        ),
    )


def add(a, b) -> Tensor:
    return _elementwise_binary(
        "add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g
    )


def sub(a, b) -> Tensor:
    return _elementwise_binary(
        "sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g
    )


def mul(a, b) -> Tensor:
    return _elementwise_binary(
        "mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = _check_out("matmul", a.data @ b.data)
    tape = _active_tape()
    if tape is None:
        return Tensor(out)
    ad, bd = a.data, b.data
    return tape._record(
        out,
        ((a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)),
    )


def _elementwise_unary(name, x, fwd, dfx):
    x = as_tensor(x)
    with _quiet():
        out = fwd(x.data)
    _check_out(name, out)
    tape = _active_tape()
    if tape is None:
        return Tensor(out)
    xd = x.data
    return tape._record(out, ((x, lambda g: dfx(g, xd, out)),))


def exp(x) -> Tensor:
    return _elementwise_unary("exp", x, np.exp, lambda g, xd, out: g * out)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log of a non-positive value")
    return _elementwise_unary("log", x, np.log, lambda g, xd, out: g / xd)


def tanh(x) -> Tensor:
    return _elementwise_unary(
        "tanh", x, np.tanh, lambda g, xd, out: g * (1.0 - out * out)
    )


def softplus(x) -> Tensor:
    # logaddexp form never overflows for large positive inputs
    return _elementwise_unary(
        "softplus",
        x,
        lambda xd: np.logaddexp(0.0, xd),
        lambda g, xd, out: g * _sp.expit(xd),
    )


def lgamma(x) -> Tensor:
    """Log-gamma; needed by the Beta log-density (backward uses digamma)."""
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("lgamma of a non-positive value")
    return _elementwise_unary(
        "lgamma", x, _sp.gammaln, lambda g, xd, out: g * _sp.psi(xd)
    )


def tsum(x, axis=None) -> Tensor:
    """Sum over all elements (scalar) or along one axis (keepdims)."""
    x = as_tensor(x)
    if axis is None:
        out = _check_out("sum", np.asarray(x.data.sum()))
    else:
        out = _check_out("sum", x.data.sum(axis=axis, keepdims=True))
    tape = _active_tape()
    if tape is None:
        return Tensor(out)
    xsh = x.data.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, xsh).copy() if xsh else np.asarray(g)
        return np.broadcast_to(g, xsh).copy()

    return tape._record(out, ((x, vjp),))


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
        out = _check_out("mean", np.asarray(x.data.mean()))
    else:
        n = x.data.shape[axis]
        out = _check_out("mean", x.data.mean(axis=axis, keepdims=True))
    tape = _active_tape()
    if tape is None:
        return Tensor(out)
    xsh = x.data.shape

    def vjp(g):
        return np.broadcast_to(g / n, xsh).copy()

    return tape._record(out, ((x, vjp),))


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    x = as_tensor(x)
    if axis >= x.data.ndim or start < 0 or start + length > x.data.shape[axis]:
        raise ShapeError(
            f"slice [{start}:{start + length}) on axis {axis} of shape {x.shape}"
        )
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = x.data[index].copy()
    tape = _active_tape()
    if tape is None:
        return Tensor(out)
    xsh = x.data.shape

    def vjp(g):
        full = np.zeros(xsh)
        full[index] = g
        return full

    return tape._record(out, ((x, vjp),))


def concat(parts, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    _check_out("concat", out)
    tape = _active_tape()
    if tape is None:
        return Tensor(out)
    offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return tape._record(out, tuple((p, make_vjp(i)) for i, p in enumerate(parts)))


def scale(x, c: float) -> Tensor:
    """Multiply by a python constant."""
    x = as_tensor(x)
    c = float(c)
    out = _check_out("scale", x.data * c)
    tape = _active_tape()
    if tape is None:
        return Tensor(out)
    return tape._record(out, ((x, lambda g: g * c),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape {x.shape} -> {shape}: {e}") from None
    tape = _active_tape()
    if tape is None:
        return Tensor(out)
    xsh = x.data.shape
    return tape._record(out, ((x, lambda g: g.reshape(xsh)),))


def repeat_rows(x, k: int) -> Tensor:
    """Repeat each row k times: (n, m) -> (n*k, m); the gradient is the
    per-group row sum. Lets per-state quantities be computed once and shared
    across Monte-Carlo draws."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"repeat_rows expects a 2-D input, got {x.shape}")
    out = np.repeat(x.data, k, axis=0)
    tape = _active_tape()
    if tape is None:
        return Tensor(out)
    n, m = x.data.shape
    return tape._record(out, ((x, lambda g: g.reshape(n, k, m).sum(axis=1)),))


def neg(x) -> Tensor:
    return scale(x, -1.0)


def square(x) -> Tensor:
    x = as_tensor(x)
    return mul(x, x)


def logsumexp(x, axis: int = 1) -> Tensor:
    """log(sum(exp(x), axis)) with a constant max-shift for stability.

    The shift is detached; the true derivative w.r.t. it is zero, so the
    gradient is exact.
    """
    x = as_tensor(x)
    shift = np.max(x.data, axis=axis, keepdims=True)
    shifted = sub(x, constant(shift))
    return add(log(tsum(exp(shifted), axis=axis)), constant(shift))


# name -> callable, for callers that address the op set by string
OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "softplus": softplus,
    "lgamma": lgamma,
    "sum": tsum,
    "mean": tmean,
    "slice": narrow,
    "concat": concat,
    "scale": scale,
    "reshape": reshape,
}


def forward_op(op: str, *args, **kwargs) -> Tensor:
    """Dispatch one of the whitelisted operations by name."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ShapeError(f"unknown operation '{op}'") from None
    return fn(*args, **kwargs)


def grad(output: Tensor, tape: Tape, wrt: Tensor) -> np.ndarray:
    """Convenience wrapper around ``tape.gradient``."""
    return tape.gradient(output, wrt)

"""Minimal reverse-mode differentiation over dense numpy arrays.

A :class:`Tape` records primitive applications in execution order;
backward replays them in exact reverse order, accumulating
vector-Jacobian products into ``Tensor.grad``. Only what the training
loss needs is implemented: elementwise math, matmul, reductions,
softmax/cumsum/concat/gather for the spline transform, a batched
log-determinant, and the straight-through estimator for binary masks.

Ops run "eager" (no recording) when no tape is active or no input
requires gradients, so the same code paths serve oracle computations.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Adam",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "softplus",
    "softmax",
    "cumsum",
    "concat",
    "gather",
    "reshape",
    "transpose_last2",
    "tsum",
    "tmean",
    "logdet",
    "straight_through",
]

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """Value plus gradient slot; leaves carry ``requires_grad``."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return powc(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitives for one forward/backward pass."""

    def __init__(self, check_finite: bool = False):
        self.nodes: list[tuple[Tensor, tuple]] = []
        self.check_finite = check_finite

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False

    def gradients(self, loss: Tensor, params: list[Tensor]) -> list[np.ndarray]:
        """Accumulate d(loss)/d(param) for each param; repeatable."""
        for out, pv in self.nodes:
            out.grad = None
            for p, _ in pv:
                p.grad = None
        loss.grad = np.ones_like(loss.value)
        for out, pv in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            for p, vjp in pv:
                contrib = vjp(g)
                p.grad = contrib if p.grad is None else p.grad + contrib
        return [
            p.grad if p.grad is not None else np.zeros_like(p.value) for p in params
        ]


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name: str, out: Tensor, parent_vjps) -> Tensor:
    if not _ACTIVE_TAPES:
        return out
    tape = _ACTIVE_TAPES[-1]
    tracked = tuple((p, f) for p, f in parent_vjps if p.requires_grad)
    if not tracked:
        return out
    if tape.check_finite and not np.all(np.isfinite(out.value)):
        raise FloatingPointError(f"non-finite value in forward pass at op '{name}'")
    out.requires_grad = True
    tape.nodes.append((out, tracked))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over axes that were broadcast to reach its shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise arithmetic --------------------------------------------


def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = Tensor(a.value + b.value)
    return _record(
        "add",
        out,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
    )


def sub(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = Tensor(a.value - b.value)
    return _record(
        "sub",
        out,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = Tensor(a.value * b.value)
    return _record(
        "mul",
        out,
        (
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = Tensor(a.value / b.value)
    return _record(
        "div",
        out,
        (
            (a, lambda g: _unbroadcast(g / b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)),
        ),
    )


def neg(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(-a.value)
    return _record("neg", out, ((a, lambda g: -g),))


def powc(a, p) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _ensure(a)
    p = float(p)
    out = Tensor(a.value**p)
    return _record("pow", out, ((a, lambda g: g * p * a.value ** (p - 1.0)),))


def matmul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = Tensor(a.value @ b.value)

    def ga(g):
        return _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape)

    def gb(g):
        return _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape)

    return _record("matmul", out, ((a, ga), (b, gb)))


# --- elementwise nonlinearities ----------------------------------------


def exp(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(np.exp(a.value))
    return _record("exp", out, ((a, lambda g: g * out.value),))


def log(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(np.log(a.value))
    return _record("log", out, ((a, lambda g: g / a.value),))


def sqrt(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(np.sqrt(a.value))
    return _record("sqrt", out, ((a, lambda g: g * 0.5 / out.value),))


def tanh(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(np.tanh(a.value))
    return _record("tanh", out, ((a, lambda g: g * (1.0 - out.value * out.value)),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(_sigmoid_np(a.value))
    return _record(
        "sigmoid", out, ((a, lambda g: g * out.value * (1.0 - out.value)),)
    )


def softplus(a) -> Tensor:
    a = _ensure(a)
    x = a.value
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))
    return _record("softplus", out, ((a, lambda g: g * _sigmoid_np(x)),))


def softmax(a, axis: int = -1) -> Tensor:
    a = _ensure(a)
    x = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _record("softmax", out, ((a, vjp),))


# --- shape & indexing ---------------------------------------------------


def cumsum(a, axis: int = -1) -> Tensor:
    a = _ensure(a)
    out = Tensor(np.cumsum(a.value, axis=axis))

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return _record("cumsum", out, ((a, vjp),))


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_ensure(p) for p in parts]
    out = Tensor(np.concatenate([p.value for p in parts], axis=axis))
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]

        return vjp

    return _record("concat", out, tuple((p, make_vjp(i)) for i, p in enumerate(parts)))


def gather(a, index) -> Tensor:
    """Fancy indexing with a constant integer index (array or tuple of arrays).

    The adjoint scatter-adds the upstream gradient back into place.
    """
    a = _ensure(a)
    out = Tensor(a.value[index])

    def vjp(g):
        z = np.zeros_like(a.value)
        np.add.at(z, index, g)
        return z

    return _record("gather", out, ((a, vjp),))


def reshape(a, shape) -> Tensor:
    a = _ensure(a)
    out = Tensor(a.value.reshape(shape))
    return _record("reshape", out, ((a, lambda g: g.reshape(a.value.shape)),))


def transpose_last2(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(np.swapaxes(a.value, -1, -2))
    return _record("transpose", out, ((a, lambda g: np.swapaxes(g, -1, -2)),))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape).copy()

    return _record("sum", out, ((a, vjp),))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# --- dense log-determinant ----------------------------------------------


def logdet(a) -> Tensor:
    """log|det A| for (..., d, d); adjoint is inv(A)^T scaled by upstream."""
    a = _ensure(a)
    sign, ld = np.linalg.slogdet(a.value)
    if np.any(sign == 0) or not np.all(np.isfinite(ld)):
        raise np.linalg.LinAlgError("singular matrix in logdet")
    out = Tensor(ld)

    def vjp(g):
        inv_t = np.swapaxes(np.linalg.inv(a.value), -1, -2)
        return g[..., None, None] * inv_t

    return _record("logdet", out, ((a, vjp),))


# --- straight-through estimator ------------------------------------------


def straight_through(soft: Tensor, hard) -> Tensor:
    """Forward the hard sample, backpropagate as if it were ``soft``."""
    soft = _ensure(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.value.shape:
        raise ValueError(f"shape mismatch {hard.shape} vs {soft.value.shape}")
    out = Tensor(hard)
    return _record("straight_through", out, ((soft, lambda g: g),))


# --- optimizer ------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction; parameters update in place."""

    def __init__(self, params: list[Tensor], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {i}")
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

"""Dense float64 tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
result remembers its parents and a backward rule. ``Tensor.backward`` orders
the recorded graph topologically and replays the rules in reverse, summing
contributions that reach the same tensor along different paths.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
LN_EPS = 1e-6
FD_STEP = 1e-4

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class NumericError(ArithmeticError):
    """Raised when a computation produces a non-finite value."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "retains_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)  # always copies
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.retains_grad = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> Tensor:
        self.retains_grad = True
        return self

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring it."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"implicit backward needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(tape(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node.retains_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of the graph feeding ``root`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.retains_grad = False
    out.name = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the erf-based normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    data = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(data, (x,), backward)


# -- linear algebra / shape -------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 1 or b.ndim == 1:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    return _result(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[x.shape for x in xs]} on axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, xs, backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(data), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / count)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather ``table[ids]`` along axis 0; the backward scatters with ``np.add.at``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(data, (table,), backward)


embedding = take_rows


# -- normalisation / probabilities -----------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` is an additive constant (e.g. -inf on blocked keys)."""
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm expects gain/bias of shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(data, (x, gain, bias), backward)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``.

    With ``weights`` the result is ``sum(weights * nll)`` instead, which lets
    callers mask padding and choose their own normaliser.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D (batch x V), got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if n and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target index out of range [0, {v})")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=DTYPE)
    logp = log_softmax_rows(logits.data)
    rows = np.arange(n)
    nll = -logp[rows, targets]
    data = np.asarray((w * nll).sum())

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (w * g)[:, None],)

    return _result(data, (logits,), backward)


# -- verification oracle ----------------------------------------------------

def finite_difference_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x.data`` is perturbed in place one coordinate at a time and restored.
    """
    if h <= 0:
        raise ValueError("step size must be positive")

    def value() -> float:
        with no_grad():
            out = f(x)
        v = out.item() if isinstance(out, Tensor) else float(out)
        if not np.isfinite(v):
            raise NumericError(f"function value is not finite: {v}")
        return v

    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value()
        flat[i] = orig - h
        fm = value()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a, b) -> float:
    """Max-norm relative discrepancy, ``|a-b|_inf / max(|a|_inf, |b|_inf)``."""
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    diff = np.abs(a - b).max(initial=0.0)
    return 0.0 if scale == 0.0 else float(diff / scale)


def check_gradients(f: Callable[..., Tensor], inputs: Iterable[Tensor], h: float = FD_STEP) -> dict[str, float]:
    """Compare tape gradients of ``f(*inputs)`` against central differences.

    Returns the relative error per input (keyed by name or position).
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    f(*inputs).backward()
    errors = {}
    for i, t in enumerate(inputs):
        def partial(_x, i=i):
            return f(*inputs)
        fd = finite_difference_grad(partial, t, h)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors[t.name or str(i)] = relative_error(analytic, fd)
    return errors

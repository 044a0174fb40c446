"""AdamW with decoupled weight decay, plus plain gradient descent."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import NumericError, Tensor


@dataclass
class AdamWState:
    step: int = 0
    counts: dict[str, int] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamWState,
               lr: float, wd: float = 0.0, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place AdamW update.

    Parameters whose gradient is ``None`` (not reached by the loss) are left
    untouched, including their decay and moments.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        # per-parameter count: a tensor first reached late still gets full bias correction
        t = state.counts[name] = state.counts.get(name, 0) + 1
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        p.data *= 1.0 - lr * wd
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], lr: float) -> None:
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        p.data -= lr * g

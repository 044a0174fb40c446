"""Hypernetworks that map a task embedding to a soft prompt matrix.

All generators share one interface: ``generator(e)`` returns an ``(n, d)``
tensor. ``DirectGenerator`` is ordinary prompt tuning (the prompt is the
parameter); the others project the task embedding ``e`` through a linear map,
a rank-limited linear map, or a two-layer GeLU network, then matricize the
length ``n*d`` result row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import DimensionError, Tensor, gelu, matmul, reshape

INIT_STD = 0.02
DEFAULT_RANK = 8
KINDS = ("direct", "linear", "lowrank", "mlp")


@dataclass(frozen=True)
class PromptShape:
    n: int
    d: int

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError(f"prompt shape must be positive, got n={self.n}, d={self.d}")

    @property
    def flat(self) -> int:
        return self.n * self.d


class TaskEmbedding:
    """Trainable vector identifying one task."""

    def __init__(self, task_id: str, k: int, rng: np.random.Generator | None = None, value=None):
        if value is not None:
            data = np.asarray(value, dtype=np.float64).reshape(-1)
        else:
            if k < 1:
                raise ValueError("task embedding width must be >= 1")
            rng = rng if rng is not None else np.random.default_rng(0)
            data = rng.normal(0.0, INIT_STD, size=k)
        self.task_id = task_id
        self.e = Tensor(data, requires_grad=True, name=f"task/{task_id}")

    @property
    def k(self) -> int:
        return self.e.shape[0]

    def __repr__(self):
        return f"TaskEmbedding({self.task_id!r}, k={self.k})"


def matricize(v: Tensor, shape: PromptShape) -> Tensor:
    """Row-major reshape of a length ``n*d`` vector into an ``(n, d)`` matrix."""
    if v.ndim != 1 or v.shape[0] != shape.flat:
        raise DimensionError(f"cannot matricize vector of shape {v.shape} into ({shape.n}, {shape.d})")
    return reshape(v, (shape.n, shape.d))


def flatten(R: Tensor) -> Tensor:
    return reshape(R, (R.size,))


def _column(e: Tensor) -> Tensor:
    return reshape(e, (e.shape[0], 1))


class PromptGenerator:
    kind = "base"

    def __init__(self, shape: PromptShape, k: int):
        self.shape = shape
        self.k = k
        self.params: dict[str, Tensor] = {}

    def __call__(self, e: Tensor | TaskEmbedding) -> Tensor:
        if isinstance(e, TaskEmbedding):
            e = e.e
        return self.forward(e)

    def forward(self, e: Tensor) -> Tensor:
        raise NotImplementedError

    def _check_width(self, e: Tensor) -> None:
        if e.shape != (self.k,):
            raise DimensionError(f"{self.kind} generator expects task embedding of shape ({self.k},), got {e.shape}")

    def _param(self, name: str, data) -> Tensor:
        t = Tensor(data, requires_grad=True, name=f"{self.kind}/{name}")
        self.params[name] = t
        return t

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def hyperparameters(self) -> dict:
        return {"kind": self.kind, "n": self.shape.n, "d": self.shape.d, "k": self.k}

    def __repr__(self):
        hp = ", ".join(f"{k}={v}" for k, v in self.hyperparameters().items() if k != "kind")
        return f"{type(self).__name__}({hp})"


class DirectGenerator(PromptGenerator):
    """Standard prompt tuning: the prompt matrix itself is the parameter."""

    kind = "direct"

    def __init__(self, shape: PromptShape, k: int = 1, init=None, rng: np.random.Generator | None = None):
        super().__init__(shape, k)
        if init is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            init = rng.normal(0.0, INIT_STD, size=(shape.n, shape.d))
        init = np.asarray(init, dtype=np.float64)
        if init.shape != (shape.n, shape.d):
            raise DimensionError(f"initial prompt has shape {init.shape}, expected ({shape.n}, {shape.d})")
        self.R_raw = self._param("R_raw", init)

    def forward(self, e: Tensor) -> Tensor:
        # task embedding deliberately ignored
        return self.R_raw


class LinearGenerator(PromptGenerator):
    kind = "linear"

    def __init__(self, shape: PromptShape, k: int, rng: np.random.Generator | None = None):
        super().__init__(shape, k)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = self._param("W", rng.normal(0.0, INIT_STD, size=(shape.flat, k)))
        self.b = self._param("b", np.zeros(shape.flat))

    def forward(self, e: Tensor) -> Tensor:
        self._check_width(e)
        v = reshape(matmul(self.W, _column(e)), (self.shape.flat,)) + self.b
        return matricize(v, self.shape)


class LowRankGenerator(PromptGenerator):
    """Linear generator whose projection is factored as ``C @ F`` with inner width ``rank``."""

    kind = "lowrank"

    def __init__(self, shape: PromptShape, k: int, rank: int = DEFAULT_RANK, rng: np.random.Generator | None = None):
        super().__init__(shape, k)
        if rank < 1:
            raise ValueError("rank must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.rank = rank
        self.C = self._param("C", rng.normal(0.0, INIT_STD, size=(shape.flat, rank)))
        self.F = self._param("F", rng.normal(0.0, INIT_STD, size=(rank, k)))
        self.b = self._param("b", np.zeros(shape.flat))

    def effective_weight(self) -> np.ndarray:
        return self.C.data @ self.F.data

    def forward(self, e: Tensor) -> Tensor:
        self._check_width(e)
        # F e first keeps the intermediate at width rank
        v = reshape(matmul(self.C, matmul(self.F, _column(e))), (self.shape.flat,)) + self.b
        return matricize(v, self.shape)

    def hyperparameters(self):
        return {**super().hyperparameters(), "rank": self.rank}


class MLPGenerator(PromptGenerator):
    kind = "mlp"

    def __init__(self, shape: PromptShape, k: int, hidden: int | None = None, rng: np.random.Generator | None = None):
        super().__init__(shape, k)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden if hidden is not None else 4 * k
        h = self.hidden
        self.W1 = self._param("W1", rng.normal(0.0, INIT_STD, size=(h, k)))
        self.b1 = self._param("b1", np.zeros(h))
        self.W2 = self._param("W2", rng.normal(0.0, INIT_STD, size=(shape.flat, h)))
        self.b2 = self._param("b2", np.zeros(shape.flat))

    def forward(self, e: Tensor) -> Tensor:
        self._check_width(e)
        z = reshape(matmul(self.W1, _column(e)), (self.hidden,)) + self.b1
        v = reshape(matmul(self.W2, _column(gelu(z))), (self.shape.flat,)) + self.b2
        return matricize(v, self.shape)

    def hyperparameters(self):
        return {**super().hyperparameters(), "hidden": self.hidden}


def make_generator(kind: str, shape: PromptShape, k: int, rng: np.random.Generator | None = None,
                   rank: int = DEFAULT_RANK, hidden: int | None = None, init=None) -> PromptGenerator:
    if kind == "direct":
        return DirectGenerator(shape, k, init=init, rng=rng)
    if kind == "linear":
        return LinearGenerator(shape, k, rng=rng)
    if kind == "lowrank":
        return LowRankGenerator(shape, k, rank=rank, rng=rng)
    if kind == "mlp":
        return MLPGenerator(shape, k, hidden=hidden, rng=rng)
    raise ValueError(f"unknown generator kind {kind!r}; expected one of {KINDS}")


def generate(g: PromptGenerator, e: Tensor | TaskEmbedding) -> Tensor:
    return g(e)


def parameter_count(g: PromptGenerator | str, k: int | None = None, shape: PromptShape | None = None,
                    rank: int = DEFAULT_RANK, hidden: int | None = None) -> int:
    """Trainable scalars in a generator, excluding the task embedding.

    Accepts either a built generator or a kind name plus its dimensions, in
    which case the closed form is used without allocating anything.
    """
    if isinstance(g, PromptGenerator):
        return sum(p.size for p in g.parameters())
    if shape is None or k is None:
        raise ValueError("kind-based parameter_count needs shape and k")
    nd = shape.flat
    if g == "direct":
        return nd
    if g == "linear":
        return nd * k + nd
    if g == "lowrank":
        return nd * rank + rank * k + nd
    if g == "mlp":
        h = hidden if hidden is not None else 4 * k
        return h * k + h + nd * h + nd
    raise ValueError(f"unknown generator kind {g!r}")


def reduce_to_standard(shape: PromptShape, W=None, b=None) -> tuple[LinearGenerator, TaskEmbedding]:
    """Linear generator with ``k = 1`` and task embedding ``[1]``.

    With this pair the generated prompt is ``M(W[:, 0] + b)``, so the ``n*d``
    values of a direct prompt are recovered exactly.
    """
    g = LinearGenerator(shape, 1)
    g.W.data[...] = 0.0 if W is None else np.asarray(W, dtype=np.float64).reshape(shape.flat, 1)
    g.b.data[...] = 0.0 if b is None else np.asarray(b, dtype=np.float64).reshape(shape.flat)
    return g, TaskEmbedding("standard", 1, value=[1.0])

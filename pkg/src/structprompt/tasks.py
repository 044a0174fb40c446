"""Synthetic seq2seq tasks and the balanced multi-task batch mixer."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import vocab

TASK_KINDS = ("copy", "reverse", "sort-digits", "parity-classify", "key-value-lookup")
LETTERS = "abcdefgh"
DIGITS = "0123456789"
DELIM = "|"


class ConfigError(ValueError):
    """Invalid task or experiment configuration."""


@dataclass(frozen=True)
class Example:
    source: str
    target: str

    @property
    def X(self) -> list[int]:
        return vocab.encode(self.source)

    @property
    def Y(self) -> list[int]:
        return vocab.encode(self.target)


@dataclass
class TaskSpec:
    task_id: str
    kind: str
    seed: int
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200
    min_len: int | None = None
    max_len: int | None = None
    metric: str = "exact_match"
    labels: tuple[str, ...] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels) if self.labels else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TaskSpec:
        d = dict(d)
        if d.get("labels"):
            d["labels"] = tuple(d["labels"])
        return cls(**d)


@dataclass
class TaskDataset:
    spec: TaskSpec
    train: list[Example]
    dev: list[Example]
    test: list[Example]

    def split(self, name: str) -> list[Example]:
        if name not in ("train", "dev", "test"):
            raise KeyError(name)
        return getattr(self, name)


_DEFAULT_LENGTHS = {
    "copy": (3, 8),
    "reverse": (3, 8),
    "sort-digits": (4, 8),
    "parity-classify": (8, 14),
    "key-value-lookup": (2, 4),  # number of key/value pairs
}


def _sample(kind: str, rng: np.random.Generator, lo: int, hi: int, index: int) -> Example:
    if kind in ("copy", "reverse"):
        s = "".join(rng.choice(list(LETTERS), size=int(rng.integers(lo, hi + 1))))
        return Example(s, s if kind == "copy" else s[::-1])
    if kind == "sort-digits":
        s = "".join(rng.choice(list(DIGITS), size=int(rng.integers(lo, hi + 1))))
        return Example(s, "".join(sorted(s)))
    if kind == "parity-classify":
        bits = rng.integers(0, 2, size=int(rng.integers(lo, hi + 1)))
        want_odd = index % 2 == 1  # alternate labels so every split is balanced
        if (bits.sum() % 2 == 1) != want_odd:
            bits[-1] ^= 1
        s = "".join(str(b) for b in bits)
        return Example(s, "odd" if want_odd else "even")
    if kind == "key-value-lookup":
        m = int(rng.integers(lo, hi + 1))
        keys = rng.choice(list(LETTERS), size=m, replace=False)
        vals = rng.choice(list(DIGITS), size=m)
        q = int(rng.integers(0, m))
        s = "".join(k + v for k, v in zip(keys, vals)) + DELIM + keys[q]
        return Example(s, str(vals[q]))
    raise ConfigError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")


def make_task(kind: str, seed: int, train_size: int = 2000, dev_size: int = 200, test_size: int = 200,
              task_id: str | None = None, min_len: int | None = None, max_len: int | None = None) -> tuple[TaskSpec, TaskDataset]:
    """Build a deterministic dataset for ``kind``.

    Examples are drawn from one seeded stream, de-duplicated on the source
    string, and cut into train/dev/test in order, so the splits never share a
    source.
    """
    if kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    lo, hi = _DEFAULT_LENGTHS[kind]
    lo = lo if min_len is None else min_len
    hi = hi if max_len is None else max_len
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad length range [{lo}, {hi}] for {kind}")
    spec = TaskSpec(
        task_id=task_id or kind, kind=kind, seed=seed,
        train_size=train_size, dev_size=dev_size, test_size=test_size,
        min_len=lo, max_len=hi,
        labels=("even", "odd") if kind == "parity-classify" else None,
    )
    total = train_size + dev_size + test_size
    rng = np.random.default_rng([seed, TASK_KINDS.index(kind)])
    seen: set[str] = set()
    pool: list[Example] = []
    attempts = 0
    while len(pool) < total:
        attempts += 1
        if attempts > 50 * total + 1000:
            raise ConfigError(f"{kind}: cannot draw {total} distinct examples from length range [{lo}, {hi}]")
        ex = _sample(kind, rng, lo, hi, len(pool))
        if ex.source in seen:
            continue
        seen.add(ex.source)
        pool.append(ex)
    ds = TaskDataset(spec, pool[:train_size], pool[train_size:train_size + dev_size], pool[train_size + dev_size:])
    return spec, ds


def save_task(ds: TaskDataset, root: str | Path) -> Path:
    """Write ``root/<task_id>/{train,dev,test}.tsv`` plus ``spec.json``."""
    d = Path(root) / ds.spec.task_id
    d.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        lines = [f"{ex.source}\t{ex.target}\n" for ex in ds.split(name)]
        (d / f"{name}.tsv").write_text("".join(lines), encoding="latin-1")
    (d / "spec.json").write_text(json.dumps(ds.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return d


def load_task(path: str | Path) -> TaskDataset:
    d = Path(path)
    spec = TaskSpec.from_dict(json.loads((d / "spec.json").read_text()))
    splits = {}
    for name in ("train", "dev", "test"):
        rows = []
        for line in (d / f"{name}.tsv").read_text(encoding="latin-1").splitlines():
            src, tgt = line.split("\t")
            rows.append(Example(src, tgt))
        splits[name] = rows
    return TaskDataset(spec, **splits)


def token_frequencies(examples, vocab_size: int = vocab.VOCAB_SIZE) -> np.ndarray:
    counts = np.zeros(vocab_size, dtype=np.int64)
    for ex in examples:
        for i in ex.X:
            counts[i] += 1
    return counts


def most_frequent_tokens(examples, n: int, vocab_size: int = vocab.VOCAB_SIZE) -> list[int]:
    """Ids of the ``n`` most frequent input tokens; ties go to the lower id.

    Tokens that never occur still fill the list (by id) when the corpus has
    fewer than ``n`` distinct tokens.
    """
    counts = token_frequencies(examples, vocab_size)
    order = sorted(range(vocab_size), key=lambda i: (-counts[i], i))
    return order[:n]


@dataclass
class _TaskCursor:
    perm: np.ndarray
    pos: int = 0
    epoch: int = 0


class MultiTaskMixer:
    """Yields batches with near-equal per-task quotas.

    Each batch takes ``B // T`` examples from every task; the ``B % T``
    leftover slots rotate across tasks from batch to batch. Every task walks
    its own shuffled permutation without replacement and reshuffles when it
    runs out.
    """

    def __init__(self, tasks: list[tuple[str, list[Example]]], batch_size: int, seed: int = 0):
        if not tasks:
            raise ConfigError("mixer needs at least one task")
        for tid, exs in tasks:
            if not exs:
                raise ConfigError(f"task {tid!r} has no training examples")
        if batch_size < len(tasks):
            raise ConfigError(f"batch size {batch_size} smaller than number of tasks {len(tasks)}")
        self.task_ids = [t for t, _ in tasks]
        self.examples = [list(exs) for _, exs in tasks]
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.batches = 0
        self.cursors = [_TaskCursor(self.rng.permutation(len(exs))) for exs in self.examples]

    @property
    def n_tasks(self) -> int:
        return len(self.task_ids)

    def quotas(self, batch_index: int | None = None) -> list[int]:
        b = self.batches if batch_index is None else batch_index
        T = self.n_tasks
        base, extra = divmod(self.batch_size, T)
        start = (b * extra) % T
        bonus = {(start + j) % T for j in range(extra)}
        return [base + (1 if t in bonus else 0) for t in range(T)]

    def _draw(self, t: int, count: int) -> list[Example]:
        cur = self.cursors[t]
        out = []
        while count:
            if cur.pos == len(cur.perm):
                cur.perm = self.rng.permutation(len(self.examples[t]))
                cur.pos = 0
                cur.epoch += 1
            take = min(count, len(cur.perm) - cur.pos)
            out.extend(self.examples[t][i] for i in cur.perm[cur.pos:cur.pos + take])
            cur.pos += take
            count -= take
        return out

    def next_batch(self) -> list[tuple[str, Example]]:
        batch = []
        for t, q in enumerate(self.quotas()):
            batch.extend((self.task_ids[t], ex) for ex in self._draw(t, q))
        self.batches += 1
        return batch

    def state_dict(self) -> dict:
        return {
            "batches": self.batches,
            "rng": self.rng.bit_generator.state,
            "cursors": [{"perm": c.perm.tolist(), "pos": c.pos, "epoch": c.epoch} for c in self.cursors],
        }

    def load_state_dict(self, state: dict) -> None:
        self.batches = state["batches"]
        self.rng.bit_generator.state = state["rng"]
        self.cursors = [_TaskCursor(np.asarray(c["perm"], dtype=np.int64), c["pos"], c["epoch"]) for c in state["cursors"]]


def next_batch(mixer: MultiTaskMixer) -> list[tuple[str, Example]]:
    return mixer.next_batch()


def quota_bounds(batch_size: int, n_tasks: int) -> tuple[int, int]:
    return batch_size // n_tasks, math.ceil(batch_size / n_tasks)

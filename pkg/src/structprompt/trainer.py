"""Prompt-tuning loop: AdamW over generator parameters and task embeddings."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import vocab
from .autograd import NumericError, Tensor, concat, reshape, take_rows
from .checkpoint import load_checkpoint, save_checkpoint
from .generators import KINDS, PromptGenerator, PromptShape, TaskEmbedding, make_generator
from .lm import FrozenSeq2SeqLM
from .optim import AdamWState, adamw_step, sgd_step
from .tasks import TASK_KINDS, ConfigError, Example, MultiTaskMixer, TaskDataset, most_frequent_tokens

log = logging.getLogger(__name__)

MODES = ("single", "multi", "full-finetune")
# Settings the method description leaves open; every RunRecord lists them.
CHOSEN_DEFAULTS = ("lr", "weight_decay", "betas", "eps", "batch_size", "steps", "eval_every", "rank", "hidden", "init_std")


@dataclass
class TrainConfig:
    lr: float = 0.1
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 3000
    eval_every: int = 200
    seed: int = 0
    mode: str = "single"
    n: int = 20
    k: int = 64
    generator: str = "lowrank"
    rank: int = 8
    hidden: int | None = None
    init_std: float = 0.02
    optimizer: str = "adamw"
    target_dev: float | None = None
    eval_limit: int | None = None

    def validate(self) -> TrainConfig:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.generator not in KINDS:
            raise ConfigError(f"generator must be one of {KINDS}, got {self.generator!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")
        for name in ("batch_size", "steps", "eval_every", "n", "k", "rank"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d).validate()


@dataclass
class RunRecord:
    config: dict
    losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_step: int | None = None
    best_dev: float | None = None
    test: dict[str, float] = field(default_factory=dict)
    wall_clock: float = 0.0
    checkpoint: str | None = None
    status: str = "running"
    error: str | None = None
    chosen_defaults: list[str] = field(default_factory=lambda: list(CHOSEN_DEFAULTS))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> RunRecord:
        return cls(**json.loads(text))

    def comparable(self) -> dict:
        """Everything except timing and file locations."""
        d = asdict(self)
        d.pop("wall_clock")
        d.pop("checkpoint")
        return d


# -- construction helpers -------------------------------------------------------

def build_generator(cfg: TrainConfig, lm: FrozenSeq2SeqLM, datasets: dict[str, TaskDataset]) -> PromptGenerator:
    """Generator for ``cfg``; the direct prompt starts from frequent-token embeddings."""
    shape = PromptShape(cfg.n, lm.config.d_model)
    rng = np.random.default_rng([cfg.seed, 1])
    init = None
    if cfg.generator == "direct":
        corpus = [ex for ds in datasets.values() for ex in ds.train]
        ids = most_frequent_tokens(corpus, cfg.n, lm.config.vocab_size)
        init = lm.params["embed"].data[ids]
    g = make_generator(cfg.generator, shape, cfg.k, rng=rng, rank=cfg.rank, hidden=cfg.hidden, init=init)
    if cfg.init_std != 0.02 and cfg.generator != "direct":
        for p in g.parameters():
            p.data *= cfg.init_std / 0.02
    return g


def build_embeddings(cfg: TrainConfig, task_ids) -> dict[str, TaskEmbedding]:
    out = {}
    for i, tid in enumerate(task_ids):
        e = TaskEmbedding(tid, cfg.k, rng=np.random.default_rng([cfg.seed, 2, i]))
        e.e.data *= cfg.init_std / 0.02
        out[tid] = e
    return out


# -- evaluation -------------------------------------------------------------------

def decode_examples(lm: FrozenSeq2SeqLM, R, examples: list[Example], labels=None, chunk: int = 100) -> list[list[int]]:
    allowed = [vocab.encode(l) + [vocab.EOS] for l in labels] if labels else None
    max_len = max(len(ex.Y) for ex in examples) + 1
    if allowed:
        max_len = max(len(a) for a in allowed)
    out = []
    for i in range(0, len(examples), chunk):
        part = examples[i:i + chunk]
        out.extend(lm.greedy_batch(R, [ex.X for ex in part], max_len, allowed=allowed))
    return out


def score(predictions: list[list[int]], examples: list[Example], metric: str = "exact_match") -> float:
    if metric == "exact_match":
        hits = [list(p) == ex.Y for p, ex in zip(predictions, examples)]
    elif metric == "token_accuracy":
        hits = []
        for p, ex in zip(predictions, examples):
            width = max(len(p), len(ex.Y))
            same = sum(a == b for a, b in zip(p, ex.Y))
            hits.append(same / width)
    else:
        raise ConfigError(f"unknown metric {metric!r}")
    return float(np.mean(hits))


def evaluate(lm: FrozenSeq2SeqLM, generator: PromptGenerator | None, embedding: TaskEmbedding | None,
             examples: list[Example], metric: str = "exact_match", labels=None) -> float:
    """Greedy-decode every example and score it; classification tasks decode within ``labels``."""
    if not examples:
        raise ValueError("evaluation set is empty")
    from .autograd import no_grad
    with no_grad():
        R = None if generator is None else generator(embedding.e if embedding is not None else Tensor(np.zeros(generator.k)))
    return score(decode_examples(lm, R, examples, labels), examples, metric)


# -- trainer ----------------------------------------------------------------------

class Trainer:
    def __init__(self, cfg: TrainConfig, lm: FrozenSeq2SeqLM, generator: PromptGenerator,
                 embeddings: dict[str, TaskEmbedding], datasets: dict[str, TaskDataset]):
        cfg.validate()
        if cfg.mode == "full-finetune":
            lm.unfreeze()
        elif not lm.frozen:
            raise ConfigError("prompt tuning needs a frozen LM (use mode=full-finetune to train it)")
        if cfg.mode == "single" and len(datasets) != 1:
            raise ConfigError(f"single-task mode needs exactly one task, got {len(datasets)}")
        missing = set(datasets) - set(embeddings)
        if missing:
            raise ConfigError(f"no task embedding for {sorted(missing)}")
        self.cfg = cfg
        self.lm = lm
        self.generator = generator
        self.embeddings = embeddings
        self.datasets = datasets
        self.task_ids = list(datasets)
        self.mixer = MultiTaskMixer([(t, datasets[t].train) for t in self.task_ids], cfg.batch_size, seed=[cfg.seed, 3])
        self.params: dict[str, Tensor] = {f"gen/{k}": t for k, t in generator.named_parameters().items()}
        self.params.update({f"task/{t}": embeddings[t].e for t in self.task_ids})
        if cfg.mode == "full-finetune":
            self.params.update({f"lm/{k}": t for k, t in lm.named_parameters().items()})
        self.opt = AdamWState()
        self.steps_done = 0
        self.best_state: dict[str, np.ndarray] | None = None
        self.record = RunRecord(config={
            "train": cfg.to_dict(),
            "generator": generator.hyperparameters(),
            "lm": lm.config.to_dict(),
            "lm_seed": lm.seed,
            "tasks": {t: ds.spec.to_dict() for t, ds in datasets.items()},
        })

    # one optimisation step
    def prompts_for(self, task_ids: list[str]) -> Tensor:
        """Prompt for each listed task as one ``(B, n, d)`` tensor (or ``(n, d)`` if all share a task)."""
        uniq = list(dict.fromkeys(task_ids))
        mats = {t: self.generator(self.embeddings[t]) for t in uniq}
        if len(uniq) == 1:
            return mats[uniq[0]]
        n, d = self.generator.shape.n, self.generator.shape.d
        stack = concat([reshape(mats[t], (1, n, d)) for t in uniq], axis=0)
        return take_rows(stack, [uniq.index(t) for t in task_ids])

    def batch_loss(self, batch: list[tuple[str, Example]]) -> Tensor:
        R = self.prompts_for([t for t, _ in batch])
        return self.lm.batch_nll(R, [ex.X for _, ex in batch], [ex.Y for _, ex in batch])

    def step(self, batch: list[tuple[str, Example]] | None = None) -> float:
        if batch is None:
            batch = self.mixer.next_batch()
        for p in self.params.values():
            p.zero_grad()
        loss = self.batch_loss(batch)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"loss is {value} at step {self.steps_done + 1}")
        loss.backward()
        grads = {k: p.grad for k, p in self.params.items()}
        c = self.cfg
        if c.optimizer == "sgd":
            sgd_step(self.params, grads, c.lr)
        else:
            adamw_step(self.params, grads, self.opt, c.lr, c.weight_decay, c.betas[0], c.betas[1], c.eps)
        self.steps_done += 1
        self.record.losses.append(value)
        return value

    # evaluation / bookkeeping
    def evaluate_split(self, split: str) -> dict[str, float]:
        out = {}
        for t in self.task_ids:
            ds = self.datasets[t]
            exs = ds.split(split)
            if split == "dev" and self.cfg.eval_limit:
                exs = exs[: self.cfg.eval_limit]
            out[t] = evaluate(self.lm, self.generator, self.embeddings[t], exs, ds.spec.metric, ds.spec.labels)
        return out

    def _log_scores(self, split: str, scores: dict[str, float]) -> None:
        for t, v in scores.items():
            self.record.evals.append({"step": self.steps_done, "split": split, "task": t,
                                      "metric": self.datasets[t].spec.metric, "value": v})

    def eval_point(self) -> float:
        scores = self.evaluate_split("dev")
        self._log_scores("dev", scores)
        mean = float(np.mean(list(scores.values())))
        if self.record.best_dev is None or mean > self.record.best_dev:
            self.record.best_dev = mean
            self.record.best_step = self.steps_done
            self.best_state = {k: p.data.copy() for k, p in self.params.items()}
        return mean

    def restore_best(self) -> None:
        if self.best_state is None:
            return
        for k, p in self.params.items():
            p.data[...] = self.best_state[k]

    def run(self, stop_at: int | None = None) -> RunRecord:
        """Train to ``cfg.steps`` (or ``stop_at``), evaluating on dev on a fixed cadence.

        Stopping early via ``stop_at`` leaves the trainer resumable; a full run
        restores the best-dev parameters and scores the test split.
        """
        c = self.cfg
        end = c.steps if stop_at is None else min(stop_at, c.steps)
        t0 = time.perf_counter()
        reached = False
        try:
            while self.steps_done < end:
                self.step()
                if self.steps_done % c.eval_every == 0 or self.steps_done == c.steps:
                    dev = self.eval_point()
                    log.info("step %d loss %.4f dev %.4f", self.steps_done, self.record.losses[-1], dev)
                    if c.target_dev is not None and dev >= c.target_dev:
                        reached = True
                        break
        except NumericError as exc:
            self.record.status = "failed"
            self.record.error = str(exc)
            log.error("run aborted: %s", exc)
        self.record.wall_clock += time.perf_counter() - t0
        if self.record.status == "failed" or self.steps_done >= c.steps or reached:
            self.finish()
        return self.record

    def finish(self) -> RunRecord:
        if self.record.status != "failed":
            self.record.status = "ok"
        if self.best_state is None and self.record.status == "ok":
            self.eval_point()
        self.restore_best()
        if self.record.status == "ok":
            self.record.test = self.evaluate_split("test")
            self._log_scores("test", self.record.test)
        return self.record

    # persistence
    def save(self, path) -> None:
        tensors = {f"param/{k}": p.data for k, p in self.params.items()}
        tensors.update({f"adam_m/{k}": v for k, v in self.opt.m.items()})
        tensors.update({f"adam_v/{k}": v for k, v in self.opt.v.items()})
        if self.best_state is not None:
            tensors.update({f"best/{k}": v for k, v in self.best_state.items()})
        extra = {
            "steps_done": self.steps_done,
            "adam_step": self.opt.step,
            "adam_counts": self.opt.counts,
            "mixer": self.mixer.state_dict(),
            "record": json.loads(self.record.to_json()),
        }
        save_checkpoint(path, tensors, self.record.config, self.cfg.seed, extra)

    def load(self, path) -> None:
        ck = load_checkpoint(path)
        if ck.config.get("train") != self.cfg.to_dict():
            raise ConfigError("checkpoint was written for a different train config")
        for k, p in self.params.items():
            p.data[...] = ck.tensors[f"param/{k}"]
        self.opt = AdamWState(step=ck.extra["adam_step"], counts=dict(ck.extra["adam_counts"]))
        for k in ck.extra["adam_counts"]:
            self.opt.m[k] = ck.tensors[f"adam_m/{k}"].copy()
            self.opt.v[k] = ck.tensors[f"adam_v/{k}"].copy()
        best = {k[5:]: v.copy() for k, v in ck.tensors.items() if k.startswith("best/")}
        self.best_state = best or None
        self.steps_done = ck.extra["steps_done"]
        self.mixer.load_state_dict(ck.extra["mixer"])
        self.record = RunRecord(**ck.extra["record"])


def train(cfg: TrainConfig, lm: FrozenSeq2SeqLM, generator: PromptGenerator,
          embeddings: dict[str, TaskEmbedding], data: dict[str, TaskDataset]) -> RunRecord:
    return Trainer(cfg, lm, generator, embeddings, data).run()


# -- pre-training the stand-in LM ------------------------------------------------

def tag_prefix(kind: str, length: int) -> list[int]:
    return [vocab.tag_token(TASK_KINDS.index(kind))] * length


def pretrain_lm(lm: FrozenSeq2SeqLM, datasets: dict[str, TaskDataset], steps: int = 4000, batch_size: int = 32,
                lr: float = 1e-2, seed: int = 0, prefix_widths=(8,), log_every: int = 500) -> list[float]:
    """Teach a fresh LM to follow discrete task markers.

    Every training input is prefixed by a random-length run (1..max_prefix)
    of its task's marker token, so the LM learns to read the task from a
    variable-width block in front of the input. Prompt tuning later replaces
    that block with soft vectors. The learning rate follows a cosine decay
    to zero. The LM is frozen again on return.
    """
    lm.unfreeze()
    rng = np.random.default_rng([seed, 11])
    ids = list(datasets)
    mixer = MultiTaskMixer([(t, datasets[t].train) for t in ids], batch_size, seed=[seed, 12])
    kinds = {t: datasets[t].spec.kind for t in ids}
    params = lm.named_parameters()
    state = AdamWState()
    losses = []
    for step in range(1, steps + 1):
        batch = mixer.next_batch()
        widths = rng.choice(np.asarray(prefix_widths), size=len(batch))
        xs = [tag_prefix(kinds[t], int(w)) + ex.X for (t, ex), w in zip(batch, widths)]
        for p in params.values():
            p.zero_grad()
        loss = lm.batch_nll(None, xs, [ex.Y for _, ex in batch])
        loss.backward()
        lr_t = lr * 0.5 * (1.0 + np.cos(np.pi * (step - 1) / steps))
        adamw_step(params, {k: p.grad for k, p in params.items()}, state, lr_t, 0.0)
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.4f", step, float(np.mean(losses[-log_every:])))
    lm.freeze()
    return losses


def tagged_accuracy(lm: FrozenSeq2SeqLM, ds: TaskDataset, width: int = 8, split: str = "dev") -> float:
    """Score the LM on `split` with the task's tag prefix and no soft prompt."""
    exs = ds.split(split)
    labels = ds.spec.labels
    allowed = [vocab.encode(l) + [vocab.EOS] for l in labels] if labels else None
    preds = []
    for i in range(0, len(exs), 100):
        part = exs[i:i + 100]
        xs = [tag_prefix(ds.spec.kind, width) + ex.X for ex in part]
        max_len = max(len(a) for a in allowed) if allowed else max(len(ex.Y) for ex in part) + 1
        preds.extend(lm.greedy_batch(None, xs, max_len, allowed=allowed))
    return score(preds, exs, ds.spec.metric)

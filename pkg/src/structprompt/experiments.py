"""Experiment engine: configs, resumable run matrices, LR sweeps and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import load_checkpoint, save_checkpoint
from .generators import KINDS
from .lm import FrozenSeq2SeqLM, LMConfig
from .tasks import TASK_KINDS, ConfigError, TaskDataset, make_task
from .trainer import RunRecord, TrainConfig, Trainer, build_embeddings, build_generator, pretrain_lm

log = logging.getLogger(__name__)

SWEEP_LRS = (0.01, 0.1, 1.0)
SWEEP_GENERATORS = ("direct", "lowrank")
CSV_COLUMNS = ("experiment", "generator", "task", "lr", "seed", "step", "split", "metric", "value")


# -- configuration -----------------------------------------------------------------

@dataclass
class DataSetup:
    seed: int = 0
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200


@dataclass
class LMSetup:
    config: dict = field(default_factory=lambda: LMConfig().to_dict())
    seed: int = 0
    pretrain_steps: int = 10000
    pretrain_lr: float = 1e-2
    pretrain_batch: int = 32
    # parity stays at chance for a d=16 model and only dilutes the other tasks
    pretrain_tasks: list[str] = field(default_factory=lambda: ["copy", "reverse", "sort-digits", "key-value-lookup"])
    prefix_widths: list[int] = field(default_factory=lambda: [8])
    cache_dir: str | None = None

    def key(self, data: DataSetup) -> str:
        d = asdict(self)
        d.pop("cache_dir")
        blob = json.dumps({"lm": d, "data": asdict(data)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    name: str
    tasks: list[str]
    generators: list[str]
    seeds: list[int]
    lrs: list[float]
    mode: str = "single"
    train: dict = field(default_factory=dict)
    data: DataSetup = field(default_factory=DataSetup)
    lm: LMSetup = field(default_factory=LMSetup)

    def validate(self) -> ExperimentConfig:
        if not self.seeds:
            raise ConfigError("seeds list must be nonempty")
        if not self.lrs or any(lr <= 0 for lr in self.lrs):
            raise ConfigError("lrs must be a nonempty list of positive numbers")
        if self.mode not in ("single", "multi", "full-finetune"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        for t in self.tasks:
            if t not in TASK_KINDS:
                raise ConfigError(f"unknown task {t!r}")
        for g in self.generators:
            if g not in KINDS:
                raise ConfigError(f"unknown generator {g!r}")
        if not self.tasks or not self.generators:
            raise ConfigError("tasks and generators must be nonempty")
        LMConfig(**self.lm.config)
        for t in self.lm.pretrain_tasks:
            if t not in TASK_KINDS:
                raise ConfigError(f"unknown pre-training task {t!r}")
        if self.train.get("n") not in self.lm.prefix_widths:
            log.warning("prompt length %s was never seen in LM pre-training (widths %s)",
                        self.train.get("n"), self.lm.prefix_widths)
        for spec in self.run_specs():
            self.train_config(spec)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        known = {"name", "tasks", "generators", "seeds", "lrs", "mode", "train", "data", "lm"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        missing = {"name", "tasks", "generators", "seeds"} - set(d)
        if missing:
            raise ConfigError(f"missing experiment keys: {sorted(missing)}")
        try:
            data = DataSetup(**(d.pop("data", None) or {}))
            lm_raw = dict(d.pop("lm", None) or {})
            lm_raw["config"] = {**LMConfig().to_dict(), **(lm_raw.get("config") or {})}
            lm = LMSetup(**lm_raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        train = dict(d.pop("train", None) or {})
        d.setdefault("lrs", [train.get("lr", TrainConfig.lr)])
        # materialise every train default so the stored config hides nothing
        full = TrainConfig().to_dict()
        full.update(train)
        cfg = cls(train=full, data=data, lm=lm, **d)
        cfg.lrs = [float(x) for x in cfg.lrs]
        cfg.seeds = [int(s) for s in cfg.seeds]
        return cfg.validate()

    def run_specs(self) -> list[RunSpec]:
        groups = [tuple(self.tasks)] if self.mode == "multi" else [(t,) for t in self.tasks]
        return [RunSpec(g, grp, lr, s) for g in self.generators for grp in groups for lr in self.lrs for s in self.seeds]

    def train_config(self, spec: RunSpec) -> TrainConfig:
        d = {**self.train, "generator": spec.generator, "lr": spec.lr, "seed": spec.seed, "mode": self.mode}
        try:
            return TrainConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_experiment(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return ExperimentConfig.from_dict(raw)


@dataclass(frozen=True)
class RunSpec:
    generator: str
    tasks: tuple[str, ...]
    lr: float
    seed: int

    @property
    def run_id(self) -> str:
        return f"{self.generator}__{'+'.join(self.tasks)}__lr{self.lr:g}__seed{self.seed}"


# -- shared resources --------------------------------------------------------------

def build_datasets(data: DataSetup, tasks) -> dict[str, TaskDataset]:
    return {t: make_task(t, data.seed, data.train_size, data.dev_size, data.test_size)[1] for t in tasks}


def lm_checkpoint_path(exp: ExperimentConfig, out: Path) -> Path:
    root = Path(exp.lm.cache_dir) if exp.lm.cache_dir else Path(out) / "lm"
    return root / f"lm-{exp.lm.key(exp.data)}.ckpt"


def prepare_lm(exp: ExperimentConfig, out: Path) -> Path:
    """Pre-train the stand-in LM once and cache it under a key of its full recipe."""
    path = lm_checkpoint_path(exp, out)
    if path.exists():
        return path
    s = exp.lm
    log.info("pre-training LM %s (%d steps)", path.name, s.pretrain_steps)
    lm = FrozenSeq2SeqLM(LMConfig(**s.config), seed=s.seed)
    datasets = build_datasets(exp.data, s.pretrain_tasks)
    losses = pretrain_lm(lm, datasets, steps=s.pretrain_steps, batch_size=s.pretrain_batch, lr=s.pretrain_lr,
                         seed=s.seed, prefix_widths=tuple(s.prefix_widths))
    save_checkpoint(path, lm.state_dict(), {"lm": asdict(s), "data": asdict(exp.data)}, s.seed,
                    {"final_loss": float(np.mean(losses[-100:]))})
    return path


def load_lm(exp: ExperimentConfig, path: Path) -> FrozenSeq2SeqLM:
    lm = FrozenSeq2SeqLM(LMConfig(**exp.lm.config), seed=exp.lm.seed)
    lm.load_state_dict(load_checkpoint(path).tensors)
    return lm.freeze()


# -- single run --------------------------------------------------------------------

def run_dir(out: Path, spec: RunSpec) -> Path:
    return Path(out) / "runs" / spec.run_id


def execute_run(exp: ExperimentConfig, spec: RunSpec, out: Path, resume: bool = False,
                lm_path: Path | None = None) -> RunRecord:
    """Train one cell, checkpointing at every evaluation so it can be resumed."""
    out = Path(out)
    d = run_dir(out, spec)
    d.mkdir(parents=True, exist_ok=True)
    lm = load_lm(exp, lm_path or prepare_lm(exp, out))
    cfg = exp.train_config(spec)
    datasets = build_datasets(exp.data, spec.tasks)
    gen = build_generator(cfg, lm, datasets)
    trainer = Trainer(cfg, lm, gen, build_embeddings(cfg, spec.tasks), datasets)
    trainer.record.config["experiment"] = exp.name
    progress = d / "progress.ckpt"
    if resume and progress.exists():
        trainer.load(progress)
        log.info("%s: resumed at step %d", spec.run_id, trainer.steps_done)
    while trainer.record.status == "running":
        trainer.run(stop_at=trainer.steps_done + cfg.eval_every)
        if trainer.record.status == "running":
            trainer.save(progress)
    final = d / "final.ckpt"
    tensors = {k: p.data for k, p in trainer.params.items()}
    save_checkpoint(final, tensors, trainer.record.config, cfg.seed, {"best_step": trainer.record.best_step})
    trainer.record.checkpoint = str(final)
    (d / "record.json").write_text(trainer.record.to_json())
    progress.unlink(missing_ok=True)
    return trainer.record


def _worker(args) -> tuple[str, RunRecord | None, str | None]:
    exp_dict, spec, out, resume, lm_path = args
    exp = ExperimentConfig.from_dict(exp_dict)
    try:
        return spec.run_id, execute_run(exp, spec, out, resume, lm_path), None
    except Exception as exc:  # reported as a failed cell
        log.exception("run %s crashed", spec.run_id)
        return spec.run_id, None, f"{type(exc).__name__}: {exc}"


def load_record(out: Path, spec: RunSpec) -> RunRecord | None:
    p = run_dir(out, spec) / "record.json"
    return RunRecord.from_json(p.read_text()) if p.exists() else None


@dataclass
class MatrixResult:
    table: ResultsTable
    records: dict[str, RunRecord]
    new_runs: int
    failed: list[str]


def run_matrix(exp: ExperimentConfig, out, jobs: int = 1, resume: bool = False) -> MatrixResult:
    """Execute every (cell x seed) run that has no RunRecord yet, then aggregate."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.yaml").write_text(yaml.safe_dump(exp.to_dict(), sort_keys=True))
    specs = exp.run_specs()
    records: dict[str, RunRecord] = {}
    todo = []
    for spec in specs:
        rec = load_record(out, spec)
        if rec is not None:
            records[spec.run_id] = rec
        else:
            todo.append(spec)
    failed: list[str] = []
    if todo:
        lm_path = prepare_lm(exp, out)
        args = [(exp.to_dict(), s, out, resume, lm_path) for s in todo]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_worker, args))
        else:
            results = [_worker(a) for a in args]
        for run_id, rec, err in results:
            if rec is None:
                failed.append(run_id)
            else:
                records[run_id] = rec
    failed.extend(rid for rid, r in records.items() if r.status != "ok")
    ordered = {s.run_id: records[s.run_id] for s in specs if s.run_id in records}
    table = ResultsTable.from_records(exp.name, ordered.values(), crashed=[s for s in specs if s.run_id in failed and s.run_id not in records])
    return MatrixResult(table, ordered, len(todo), sorted(set(failed)))


# -- aggregation / reporting -------------------------------------------------------

def _run_key(rec: RunRecord) -> tuple[str, float, int]:
    t = rec.config["train"]
    return t["generator"], float(t["lr"]), int(t["seed"])


def record_rows(rec: RunRecord, experiment: str | None = None) -> list[dict]:
    gen, lr, seed = _run_key(rec)
    exp = experiment or rec.config.get("experiment", "")
    return [{"experiment": exp, "generator": gen, "task": e["task"], "lr": lr, "seed": seed, "step": e["step"],
             "split": e["split"], "metric": e["metric"], "value": e["value"]} for e in rec.evals]


@dataclass
class Cell:
    generator: str
    task: str
    lr: float
    scores: dict[int, float] = field(default_factory=dict)
    failed: bool = False

    @property
    def mean(self) -> float | None:
        return float(np.mean(list(self.scores.values()))) if self.scores else None

    @property
    def std(self) -> float | None:
        # sample standard deviation; absent below two seeds
        return float(np.std(list(self.scores.values()), ddof=1)) if len(self.scores) >= 2 else None


def fmt_cell(mean: float | None, std: float | None) -> str:
    if mean is None:
        return "FAILED"
    s = f"{100 * mean:.2f}"
    return s if std is None else f"{s}_{{{100 * std:.2f}}}"


@dataclass
class ResultsTable:
    experiment: str
    cells: dict[tuple[str, str, float], Cell]

    @classmethod
    def from_rows(cls, experiment: str, rows, crashed=()) -> ResultsTable:
        cells: dict[tuple[str, str, float], Cell] = {}
        for r in rows:
            if r["split"] != "test":
                continue
            key = (r["generator"], r["task"], float(r["lr"]))
            cells.setdefault(key, Cell(*key)).scores[int(r["seed"])] = float(r["value"])
        for spec in crashed:
            for t in spec.tasks:
                cells.setdefault((spec.generator, t, spec.lr), Cell(spec.generator, t, spec.lr)).failed = True
        return cls(experiment, dict(sorted(cells.items())))

    @classmethod
    def from_records(cls, experiment: str, records, crashed=()) -> ResultsTable:
        rows = []
        failed = []
        for rec in records:
            if rec.status != "ok":
                gen, lr, seed = _run_key(rec)
                failed.append(RunSpec(gen, tuple(rec.config["tasks"]), lr, seed))
            rows.extend(record_rows(rec, experiment))
        return cls.from_rows(experiment, rows, list(crashed) + failed)

    @property
    def generators(self) -> list[str]:
        return sorted({k[0] for k in self.cells})

    @property
    def tasks(self) -> list[str]:
        return sorted({k[1] for k in self.cells})

    @property
    def lrs(self) -> list[float]:
        return sorted({k[2] for k in self.cells})

    def best(self, task: str, lr: float) -> str | None:
        cands = [(c.mean, g) for (g, t, l), c in self.cells.items() if t == task and l == lr and c.mean is not None and not c.failed]
        return max(cands, key=lambda x: (x[0], [-ord(ch) for ch in x[1]]))[1] if cands else None

    def avg(self, generator: str, lr: float) -> tuple[float | None, float | None]:
        cells = [self.cells.get((generator, t, lr)) for t in self.tasks]
        if any(c is None or not c.scores or c.failed for c in cells):
            return None, None
        seeds = sorted(set.intersection(*(set(c.scores) for c in cells)))
        per_seed = [np.mean([c.scores[s] for c in cells]) for s in seeds]
        if not per_seed:
            return None, None
        return float(np.mean(per_seed)), (float(np.std(per_seed, ddof=1)) if len(per_seed) >= 2 else None)

    def to_markdown(self) -> str:
        """Generator rows x task columns, ``mean_{std}`` in percent, best per column in bold."""
        lines = [f"## {self.experiment}", ""]
        tasks = self.tasks
        for lr in self.lrs:
            lines.append(f"### lr = {lr:g}")
            lines.append("")
            head = ["generator", *tasks] + (["Avg."] if len(tasks) > 1 else [])
            lines.append("| " + " | ".join(head) + " |")
            lines.append("|" + "---|" * len(head))
            for g in self.generators:
                row = [g]
                for t in tasks:
                    c = self.cells.get((g, t, lr))
                    if c is None:
                        row.append("")
                        continue
                    text = "FAILED" if c.failed and not c.scores else fmt_cell(c.mean, c.std)
                    if c.failed and c.scores:
                        text += " (partial failure)"
                    row.append(f"**{text}**" if self.best(t, lr) == g and not c.failed else text)
                if len(tasks) > 1:
                    row.append(fmt_cell(*self.avg(g, lr)))
                lines.append("| " + " | ".join(row) + " |")
            lines.append("")
        return "\n".join(lines)


def report(records, experiment: str | None = None) -> tuple[str, str]:
    """Markdown table plus long-format metrics CSV for a set of run records."""
    records = list(records)
    if not records:
        raise ValueError("report needs at least one record")
    name = experiment or records[0].config.get("experiment", "experiment")
    rows = [r for rec in records for r in record_rows(rec, name)]
    rows.sort(key=lambda r: (r["generator"], r["task"], r["lr"], r["seed"], r["split"], r["step"]))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "lr": repr(float(r["lr"])), "value": repr(float(r["value"]))})
    return ResultsTable.from_records(name, records).to_markdown(), buf.getvalue()


def table_from_csv(text: str) -> ResultsTable:
    rows = list(csv.DictReader(io.StringIO(text)))
    name = rows[0]["experiment"] if rows else ""
    return ResultsTable.from_rows(name, rows)


def load_records(out) -> list[RunRecord]:
    return [RunRecord.from_json(p.read_text()) for p in sorted(Path(out).glob("runs/*/record.json"))]


def write_report(out, records=None) -> tuple[Path, Path]:
    out = Path(out)
    records = load_records(out) if records is None else list(records)
    md, text = report(records)
    (out / "report.md").write_text(md + "\n")
    (out / "metrics.csv").write_text(text)
    return out / "report.md", out / "metrics.csv"


# -- learning-rate sensitivity -------------------------------------------------------

@dataclass
class SweepReport:
    rows: list[dict]
    dispersion: dict[str, dict]
    matrix: MatrixResult

    @property
    def lowrank_less_dispersed(self) -> bool | None:
        d = self.dispersion
        if "direct" not in d or "lowrank" not in d:
            return None
        return d["lowrank"]["std"] <= d["direct"]["std"] and d["lowrank"]["range"] <= d["direct"]["range"]

    def scores_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["generator", "task", "lr", "seed", "score"], lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({**r, "lr": repr(r["lr"]), "score": repr(r["score"])})
        return buf.getvalue()

    def dispersion_csv(self) -> str:
        buf = io.StringIO()
        cols = ["generator", "runs", "min", "max", "range", "std"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for g, d in sorted(self.dispersion.items()):
            w.writerow({"generator": g, **{k: repr(d[k]) if isinstance(d[k], float) else d[k] for k in cols[1:]}})
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["## Learning-rate sensitivity", "", "| generator | runs | min | max | range | std |", "|---|---|---|---|---|---|"]
        for g, d in sorted(self.dispersion.items()):
            lines.append(f"| {g} | {d['runs']} | {100 * d['min']:.2f} | {100 * d['max']:.2f} | {100 * d['range']:.2f} | {100 * d['std']:.2f} |")
        verdict = self.lowrank_less_dispersed
        lines += ["", f"lowrank dispersion <= direct dispersion (range and std): {verdict}", ""]
        return "\n".join(lines)


def check_sweep_config(exp: ExperimentConfig) -> None:
    if sorted(exp.lrs) != sorted(SWEEP_LRS):
        raise ConfigError(f"lr-sweep needs lrs {list(SWEEP_LRS)}, got {exp.lrs}")
    if sorted(exp.generators) != sorted(SWEEP_GENERATORS):
        raise ConfigError(f"lr-sweep compares {list(SWEEP_GENERATORS)}, got {exp.generators}")
    if len(exp.seeds) < 3:
        raise ConfigError("lr-sweep needs at least 3 seeds")


def lr_sensitivity(exp: ExperimentConfig, out, jobs: int = 1, resume: bool = False) -> SweepReport:
    check_sweep_config(exp)
    m = run_matrix(exp, out, jobs, resume)
    rows = []
    for rec in m.records.values():
        gen, lr, seed = _run_key(rec)
        for task, value in sorted(rec.test.items()):
            rows.append({"generator": gen, "task": task, "lr": lr, "seed": seed, "score": value})
    rows.sort(key=lambda r: (r["generator"], r["task"], r["lr"], r["seed"]))
    disp = {}
    for g in sorted({r["generator"] for r in rows}):
        vals = np.array([r["score"] for r in rows if r["generator"] == g])
        disp[g] = {"runs": int(vals.size), "min": float(vals.min()), "max": float(vals.max()),
                   "range": float(vals.max() - vals.min()), "std": float(vals.std(ddof=1)) if vals.size > 1 else math.nan}
    rep = SweepReport(rows, disp, m)
    out = Path(out)
    (out / "lr_sweep_scores.csv").write_text(rep.scores_csv())
    (out / "lr_sweep_dispersion.csv").write_text(rep.dispersion_csv())
    (out / "lr_sweep.md").write_text(rep.to_markdown() + "\n" + m.table.to_markdown() + "\n")
    return rep

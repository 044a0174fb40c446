"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line for its criterion. The shipped
configs under ``configs/`` are used as-is; the pre-trained stand-in LM is cached
in pytest's cache directory so only the first session pays for pre-training.
"""
from __future__ import annotations

import contextlib
import re
import time
from pathlib import Path

import numpy as np
import pytest

from structprompt import experiments as ex
from structprompt.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint
from structprompt.generators import (
    DirectGenerator, PromptShape, make_generator, parameter_count, reduce_to_standard,
)
from structprompt.tasks import MultiTaskMixer, quota_bounds
from structprompt.trainer import Trainer, TrainConfig, build_embeddings, build_generator
from structprompt.verify import TOLERANCE, run_suite

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@contextlib.contextmanager
def criterion(capsys, number: int, title: str):
    """Print a PASS/FAIL line for `number`, re-raising any failure."""
    info: list[str] = []
    try:
        yield info
    except BaseException:
        with capsys.disabled():
            print(f"\nFAIL  criterion {number:2d}: {title}  {'; '.join(info)}")
        raise
    with capsys.disabled():
        print(f"\nPASS  criterion {number:2d}: {title}  {'; '.join(info)}")


# -- shared fixtures ----------------------------------------------------------------

@pytest.fixture(scope="session")
def lm_cache(request) -> str:
    return str(request.config.cache.mkdir("structprompt-lm"))


def _load(name: str, cache: str) -> ex.ExperimentConfig:
    exp = ex.load_experiment(CONFIGS / name)
    exp.lm.cache_dir = cache
    return exp


@pytest.fixture(scope="session")
def copy_exp(lm_cache):
    return _load("copy_matrix.yaml", lm_cache)


@pytest.fixture(scope="session")
def lm(copy_exp, tmp_path_factory):
    path = ex.prepare_lm(copy_exp, tmp_path_factory.mktemp("lm"))
    return ex.load_lm(copy_exp, path)


@pytest.fixture(scope="session")
def copy_data(copy_exp):
    return ex.build_datasets(copy_exp.data, ["copy"])


@pytest.fixture(scope="session")
def copy_matrix(copy_exp, lm, tmp_path_factory):
    out = tmp_path_factory.mktemp("copy-matrix")
    return out, ex.run_matrix(copy_exp, out)


def _trainer(exp, lm, tasks, generator, **over):
    datasets = ex.build_datasets(exp.data, tasks)
    cfg = TrainConfig.from_dict({**exp.train, "generator": generator,
                                 "mode": "multi" if len(tasks) > 1 else "single", **over})
    gen = build_generator(cfg, lm, datasets)
    return Trainer(cfg, lm, gen, build_embeddings(cfg, tasks), datasets)


# -- criteria ------------------------------------------------------------------------

def test_c01_gradient_oracle_suite(capsys):
    with criterion(capsys, 1, "finite-difference gradient suite") as info:
        results, seconds = run_suite(seed=0)
        worst = max(r.error for r in results)
        info.append(f"{len(results)} checks, worst rel err {worst:.2e}, {seconds:.1f}s")
        shapes: dict[str, set] = {}
        for r in results:
            shapes.setdefault(r.name, set()).add(r.shape)
        for kind in ("direct", "linear", "lowrank", "mlp"):
            assert any(kind in name for name in shapes), f"no check for {kind} generator"
        assert all(len(s) >= 3 for s in shapes.values()), {k: len(v) for k, v in shapes.items() if len(v) < 3}
        assert all(r.error <= TOLERANCE for r in results), [r for r in results if not r.passed]
        assert seconds < 60


def test_c02_special_case_equivalence(capsys, lm, copy_data):
    with criterion(capsys, 2, "reduced generator tracks direct prompt under GD") as info:
        shape = PromptShape(8, lm.config.d_model)
        rng = np.random.default_rng(11)
        R0 = rng.normal(scale=0.5, size=(shape.n, shape.d))
        direct = DirectGenerator(shape, init=R0)
        # W = 0 and b = flatten(R0): W and e stay frozen, only b is trained
        red, e = reduce_to_standard(shape, b=R0.reshape(-1))
        assert np.array_equal(red(e).data, direct(e).data)
        mixer = MultiTaskMixer([("copy", copy_data["copy"].train)], 16, seed=5)
        lr, worst = 0.1, 0.0
        for _ in range(100):
            batch = mixer.next_batch()
            xs, ys = [x.X for _, x in batch], [x.Y for _, x in batch]
            for g, p in ((direct, direct.R_raw), (red, red.b)):
                p.zero_grad()
                lm.batch_nll(g(e), xs, ys).backward()
                p.data -= lr * p.grad
            worst = max(worst, float(np.max(np.abs(direct(e).data - red(e).data))))
        info.append(f"max prompt gap over 100 steps {worst:.1e}")
        assert worst <= 1e-10


def test_c03_frozen_invariance(capsys, lm, copy_exp):
    with criterion(capsys, 3, "LM bit-identical after 500-step runs") as info:
        before = {k: v.copy() for k, v in lm.state_dict().items()}
        for kind in ("direct", "linear", "lowrank", "mlp"):
            tr = _trainer(copy_exp, lm, ["copy"], kind, steps=500, eval_every=500, target_dev=None, eval_limit=50)
            tr.run()
            assert tr.steps_done == 500 and tr.record.status == "ok"
            after = lm.state_dict()
            assert before.keys() == after.keys()
            for name, arr in before.items():
                assert arr.tobytes() == after[name].tobytes(), f"{name} changed during {kind} run"
        info.append(f"{len(before)} tensors unchanged across 4 generators")


def test_c04_multitask_isolation(capsys, lm, lm_cache):
    with criterion(capsys, 4, "task loss touches only its own embedding") as info:
        exp = _load("multitask.yaml", lm_cache)
        tasks = list(exp.tasks)
        tr = _trainer(exp, lm, tasks, "lowrank", batch_size=12)
        batch = tr.mixer.next_batch()
        assert sorted({t for t, _ in batch}) == sorted(tasks)
        for t in tasks:
            for p in tr.params.values():
                p.zero_grad()
            tr.batch_loss([b for b in batch if b[0] == t]).backward()
            for u in tasks:
                g = tr.embeddings[u].e.grad
                if u == t:
                    assert g is not None and np.any(g != 0), f"no gradient reached e_{t}"
                else:
                    assert g is None or not np.any(g), f"loss of {t} leaked into e_{u}"
        # the mixed batch: each embedding's gradient comes only from its own examples
        for p in tr.params.values():
            p.zero_grad()
        tr.batch_loss(batch).backward()
        full = {t: tr.embeddings[t].e.grad.copy() for t in tasks}
        for t in tasks:
            for p in tr.params.values():
                p.zero_grad()
            own = [b for b in batch if b[0] == t]
            (tr.batch_loss(own) * (len(own) / len(batch))).backward()
            np.testing.assert_allclose(full[t], tr.embeddings[t].e.grad, rtol=1e-9, atol=1e-12)
        info.append(f"{len(tasks)} tasks, batch of {len(batch)}")


def test_c05_mixer_quota(capsys, lm_cache):
    with criterion(capsys, 5, "mixer quota and once-per-epoch sampling") as info:
        exp = _load("multitask.yaml", lm_cache)
        data = ex.build_datasets(exp.data, exp.tasks)
        # uneven task sizes make epochs end at different batches
        sizes = {"copy": 300, "reverse": 211, "sort-digits": 97}
        tasks = [(t, data[t].train[:sizes[t]]) for t in exp.tasks]
        checked = 0
        for B in (3, 8, 32, 33):
            lo, hi = quota_bounds(B, len(tasks))
            m = MultiTaskMixer(tasks, B, seed=[B, 1])
            drawn = {t: [] for t, _ in tasks}
            for _ in range(60):
                batch = m.next_batch()
                assert len(batch) == B
                counts = {t: 0 for t, _ in tasks}
                for t, x in batch:
                    counts[t] += 1
                    drawn[t].append(x)
                assert all(lo <= c <= hi for c in counts.values()), counts
                checked += 1
            for t, exs in tasks:
                n = len(exs)
                for start in range(0, len(drawn[t]) - n + 1, n):
                    epoch = drawn[t][start:start + n]
                    assert sorted(map(id, epoch)) == sorted(map(id, exs)), f"{t} epoch at {start} not a permutation"
        info.append(f"{checked} batches over 4 batch sizes")


def test_c06_copy_harness(capsys, copy_matrix):
    with criterion(capsys, 6, "all generators >= 0.95 exact match on copy") as info:
        out, res = copy_matrix
        assert not res.failed and len(res.records) == 12
        worst = {}
        for rec in res.records.values():
            g = rec.config["train"]["generator"]
            assert rec.config["train"]["steps"] <= 3000
            assert rec.wall_clock < 300, f"{g} took {rec.wall_clock:.0f}s"
            worst[g] = min(worst.get(g, 1.0), rec.test["copy"])
        info.append(", ".join(f"{g} min {v:.3f}" for g, v in sorted(worst.items())))
        assert sorted(worst) == ["direct", "linear", "lowrank", "mlp"]
        assert all(v >= 0.95 for v in worst.values())


def test_c07_lr_sweep(capsys, lm, lm_cache, tmp_path_factory):
    with criterion(capsys, 7, "lr-sweep emits 18 runs and the dispersion comparison") as info:
        exp = _load("lr_sweep.yaml", lm_cache)
        assert exp.tasks == ["key-value-lookup"]
        out = tmp_path_factory.mktemp("lr-sweep")
        rep = ex.lr_sensitivity(exp, out)
        assert not rep.matrix.failed
        assert len(rep.rows) == 18
        keys = {(r["generator"], r["lr"], r["seed"]) for r in rep.rows}
        assert keys == {(g, lr, s) for g in ("direct", "lowrank") for lr in (0.01, 0.1, 1.0) for s in exp.seeds}
        text = (out / "lr_sweep.md").read_text()
        assert "lowrank dispersion <= direct dispersion" in text
        assert (out / "lr_sweep_scores.csv").read_text().count("\n") == 19
        d = rep.dispersion
        info.append(f"range direct {d['direct']['range']:.3f} lowrank {d['lowrank']['range']:.3f}; "
                    f"lowrank less dispersed: {rep.lowrank_less_dispersed}")


def test_c08_multitask_table(capsys, lm, lm_cache, tmp_path_factory):
    with criterion(capsys, 8, "multi-task lowrank mean >= direct mean, table shape") as info:
        exp = _load("multitask.yaml", lm_cache)
        out = tmp_path_factory.mktemp("multitask")
        res = ex.run_matrix(exp, out)
        assert not res.failed and len(res.records) == 6
        means = {}
        for g in ("direct", "lowrank"):
            vals = [v for r in res.records.values() if r.config["train"]["generator"] == g for v in r.test.values()]
            assert len(vals) == 9
            means[g] = float(np.mean(vals))
        md = res.table.to_markdown()
        rows = [l for l in md.splitlines() if l.startswith("|")]
        header = [c.strip() for c in rows[0].strip("|").split("|")]
        assert header == ["generator", "copy", "reverse", "sort-digits", "Avg."]
        body = [[c.strip() for c in r.strip("|").split("|")] for r in rows[2:]]
        assert [r[0] for r in body] == ["direct", "lowrank"]
        cell = re.compile(r"^(\*\*)?\d+\.\d{2}_\{\d+\.\d{2}\}(\*\*)?$")
        assert all(cell.match(c) for r in body for c in r[1:]), md
        info.append(f"direct {means['direct']:.3f} lowrank {means['lowrank']:.3f}")
        assert means["lowrank"] >= means["direct"]


def test_c09_reproducibility_and_persistence(capsys, lm, copy_exp, copy_matrix, tmp_path):
    with criterion(capsys, 9, "reproducible runs, exact checkpoints, exact resume") as info:
        out, res = copy_matrix
        spec = next(s for s in copy_exp.run_specs() if s.generator == "lowrank" and s.seed == 1)
        again = ex.execute_run(copy_exp, spec, tmp_path / "again")
        assert again.comparable() == res.records[spec.run_id].comparable()
        md, text = ex.report(res.records.values())
        assert ex.report(ex.load_records(out)) == (md, text)

        ck = load_checkpoint(again.checkpoint)
        raw = Path(again.checkpoint).read_bytes()
        assert encode_checkpoint(ck.tensors, ck.config, ck.seed, ck.extra) == raw
        back = decode_checkpoint(raw)
        assert all(back.tensors[k].tobytes() == v.tobytes() for k, v in ck.tensors.items())

        over = dict(steps=300, eval_every=100, target_dev=None, eval_limit=50)
        whole = _trainer(copy_exp, lm, ["copy"], "mlp", **over)
        whole.run()
        part = _trainer(copy_exp, lm, ["copy"], "mlp", **over)
        part.run(stop_at=150)
        part.save(tmp_path / "mid.ckpt")
        resumed = _trainer(copy_exp, lm, ["copy"], "mlp", **over)
        resumed.load(tmp_path / "mid.ckpt")
        resumed.run()
        assert resumed.record.losses == whole.record.losses
        assert resumed.record.comparable() == whole.record.comparable()
        info.append(f"{len(whole.record.losses)} losses identical after resume at step 150")


def test_c10_parameter_accounting(capsys):
    with criterion(capsys, 10, "parameter counts match closed forms") as info:
        closed = {
            "direct": lambda n, d, k, r, h: n * d,
            "linear": lambda n, d, k, r, h: n * d * k + n * d,
            "lowrank": lambda n, d, k, r, h: n * d * r + r * k + n * d,
            "mlp": lambda n, d, k, r, h: h * k + h + n * d * h + n * d,
        }
        grid = [(n, d, k, r, h) for n in (1, 4, 20) for d in (1, 8, 16) for k in (1, 16, 64)
                for r in (1, 8) for h in (1, 32)]
        t0 = time.perf_counter()
        for n, d, k, r, h in grid:
            shape = PromptShape(n, d)
            for kind, f in closed.items():
                want = f(n, d, k, r, h)
                assert parameter_count(kind, k, shape, rank=r, hidden=h) == want
                g = make_generator(kind, shape, k, rank=r, hidden=h)
                assert parameter_count(g) == want
                assert sum(p.data.size for p in g.parameters()) == want
        info.append(f"{len(grid)} grid points x 4 generators in {time.perf_counter() - t0:.1f}s")

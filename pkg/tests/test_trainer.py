import numpy as np
import pytest

from structprompt import vocab
from structprompt.autograd import Tensor
from structprompt.lm import FrozenSeq2SeqLM, LMConfig
from structprompt.tasks import ConfigError, make_task
from structprompt.trainer import (
    RunRecord, TrainConfig, Trainer, build_embeddings, build_generator, evaluate, train,
)

SMALL = LMConfig(d_model=8, n_enc_layers=1, n_dec_layers=1, n_heads=2, d_ff=16, max_len=64)


def small_setup(tasks=("copy",), gen="lowrank", mode=None, **over):
    lm = FrozenSeq2SeqLM(SMALL, seed=0)
    data = {t: make_task(t, 0, 64, 16, 16)[1] for t in tasks}
    mode = mode or ("multi" if len(tasks) > 1 else "single")
    kw = {"n": 4, "k": 6, "rank": 2, "batch_size": 6, "steps": 20, "eval_every": 10, **over}
    cfg = TrainConfig(generator=gen, mode=mode, **kw)
    g = build_generator(cfg, lm, data)
    emb = build_embeddings(cfg, list(data))
    return cfg, lm, g, emb, data


def test_defaults_follow_documented_values():
    c = TrainConfig()
    assert (c.n, c.k, c.lr, c.weight_decay, c.betas, c.eps, c.batch_size, c.steps, c.eval_every) == \
        (20, 64, 0.1, 1e-5, (0.9, 0.999), 1e-8, 32, 3000, 200)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 0.1})


def test_frozen_lm_untouched_and_trainable_set_exact():
    cfg, lm, g, emb, data = small_setup(steps=100, eval_every=50)
    lm_before = lm.state_dict()
    rec = train(cfg, lm, g, emb, data)
    assert rec.status == "ok"
    for k, p in lm.named_parameters().items():
        assert np.array_equal(p.data, lm_before[k]), k
        assert np.linalg.norm(p.data) == np.linalg.norm(lm_before[k])
    trainer = Trainer(cfg, lm, build_generator(cfg, lm, data), build_embeddings(cfg, ["copy"]), data)
    assert set(trainer.params) == {"gen/C", "gen/F", "gen/b", "task/copy"}
    before = {k: p.data.copy() for k, p in trainer.params.items()}
    trainer.step()
    assert all(not np.array_equal(before[k], p.data) for k, p in trainer.params.items())


def test_direct_baseline_updates_only_prompt():
    cfg, lm, g, emb, data = small_setup(gen="direct")
    trainer = Trainer(cfg, lm, g, emb, data)
    R0 = g.R_raw.data.copy()
    e0 = emb["copy"].e.data.copy()
    lm0 = lm.state_dict()
    for _ in range(5):
        trainer.step()
    assert not np.array_equal(R0, g.R_raw.data)
    assert np.array_equal(e0, emb["copy"].e.data)
    assert all(np.array_equal(lm0[k], p.data) for k, p in lm.named_parameters().items())


def test_direct_init_copies_frequent_token_rows():
    cfg, lm, g, emb, data = small_setup(gen="direct")
    from structprompt.tasks import most_frequent_tokens
    ids = most_frequent_tokens(data["copy"].train, 4)
    assert np.array_equal(g.R_raw.data, lm.params["embed"].data[ids])


def test_multitask_isolation_three_tasks():
    cfg, lm, g, emb, data = small_setup(tasks=("copy", "reverse", "sort-digits"))
    trainer = Trainer(cfg, lm, g, emb, data)
    batch = [("copy", ex) for ex in data["copy"].train[:3]] + [("reverse", ex) for ex in data["reverse"].train[:3]]
    e3 = emb["sort-digits"].e.data.copy()
    e1 = emb["copy"].e.data.copy()
    for p in trainer.params.values():
        p.zero_grad()
    trainer.batch_loss(batch).backward()
    assert emb["sort-digits"].e.grad is None
    assert np.abs(emb["copy"].e.grad).max() > 0 and np.abs(emb["reverse"].e.grad).max() > 0
    trainer.step(batch)
    assert np.array_equal(emb["sort-digits"].e.data, e3)
    assert not np.array_equal(emb["copy"].e.data, e1)


def test_single_task_loss_touches_only_its_embedding():
    cfg, lm, g, emb, data = small_setup(tasks=("copy", "reverse"))
    trainer = Trainer(cfg, lm, g, emb, data)
    trainer.batch_loss([("reverse", ex) for ex in data["reverse"].train[:4]]).backward()
    assert emb["copy"].e.grad is None
    assert np.abs(emb["reverse"].e.grad).max() > 0
    assert np.abs(g.C.grad).max() > 0


def test_seeded_runs_identical():
    recs = []
    for _ in range(2):
        cfg, lm, g, emb, data = small_setup(gen="mlp")
        recs.append(train(cfg, lm, g, emb, data))
    assert recs[0].comparable() == recs[1].comparable()
    cfg, lm, g, emb, data = small_setup(gen="mlp", seed=1)
    assert train(cfg, lm, g, emb, data).losses != recs[0].losses


def test_best_dev_is_max_over_eval_points():
    cfg, lm, g, emb, data = small_setup(steps=40, eval_every=10, lr=0.3)
    rec = train(cfg, lm, g, emb, data)
    devs = [e["value"] for e in rec.evals if e["split"] == "dev"]
    assert rec.best_dev == max(devs)
    first = next(e["step"] for e in rec.evals if e["split"] == "dev" and e["value"] == max(devs))
    assert rec.best_step == first
    assert set(rec.test) == {"copy"}
    assert "lr" in rec.chosen_defaults


def test_resume_matches_unbroken_run(tmp_path):
    cfg, lm, g, emb, data = small_setup(steps=30, eval_every=10)
    full = Trainer(cfg, lm, g, emb, data)
    full.run()
    cfg2, lm2, g2, emb2, data2 = small_setup(steps=30, eval_every=10)
    first = Trainer(cfg2, lm2, g2, emb2, data2)
    first.run(stop_at=10)
    assert first.record.status == "running"
    first.save(tmp_path / "p.ckpt")
    cfg3, lm3, g3, emb3, data3 = small_setup(steps=30, eval_every=10)
    second = Trainer(cfg3, lm3, g3, emb3, data3)
    second.load(tmp_path / "p.ckpt")
    second.run()
    assert second.record.losses == full.record.losses
    assert second.record.comparable() == full.record.comparable()


def test_nan_loss_aborts_with_record(monkeypatch):
    cfg, lm, g, emb, data = small_setup()
    trainer = Trainer(cfg, lm, g, emb, data)
    monkeypatch.setattr(trainer, "batch_loss", lambda batch: Tensor(np.nan, requires_grad=True))
    rec = trainer.run()
    assert rec.status == "failed" and "nan" in rec.error.lower()
    assert RunRecord.from_json(rec.to_json()) == rec


def test_full_finetune_changes_lm():
    cfg, lm, g, emb, data = small_setup(mode="full-finetune", steps=10)
    before = lm.state_dict()
    trainer = Trainer(cfg, lm, g, emb, data)
    assert not lm.frozen and any(k.startswith("lm/") for k in trainer.params)
    for _ in range(10):
        trainer.step()
    assert any(not np.array_equal(before[k], p.data) for k, p in lm.named_parameters().items())


def test_prompt_tuning_rejects_unfrozen_lm():
    cfg, lm, g, emb, data = small_setup()
    lm.unfreeze()
    with pytest.raises(ConfigError):
        Trainer(cfg, lm, g, emb, data)


class _Oracle:
    """Stand-in LM that decodes with a fixed rule."""

    def __init__(self, rule):
        self.rule = rule

    def greedy_batch(self, R, xs, max_len, allowed=None):
        return [self.rule(x) for x in xs]


def test_evaluate_perfect_and_sentinel():
    _, ds = make_task("copy", 0, 10, 50, 10)
    assert evaluate(_Oracle(list), None, None, ds.dev) == 1.0
    assert evaluate(_Oracle(lambda x: [vocab.encode("#")[0]]), None, None, ds.dev) == 0.0
    assert evaluate(_Oracle(list), None, None, ds.dev, metric="token_accuracy") == 1.0


def test_untrained_parity_at_chance():
    lm = FrozenSeq2SeqLM(LMConfig(), seed=0)
    cfg = TrainConfig(generator="linear", n=8, k=16)
    _, ds = make_task("parity-classify", 0, 10, 200, 10)
    g = build_generator(cfg, lm, {"parity-classify": ds})
    e = build_embeddings(cfg, ["parity-classify"])["parity-classify"]
    acc = evaluate(lm, g, e, ds.dev, labels=ds.spec.labels)
    assert 0.3 <= acc <= 0.7

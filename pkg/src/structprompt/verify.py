"""Finite-difference checks for every differentiable primitive and generator."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autograd import (
    Tensor, check_gradients, concat, gelu, layer_norm, matmul, reshape, softmax, softmax_cross_entropy,
    take_rows, transpose,
)
from .generators import PromptShape, TaskEmbedding, make_generator
from .lm import FrozenSeq2SeqLM, LMConfig, conditional_nll

TOLERANCE = 1e-5


@dataclass
class GradCheck:
    name: str
    shape: tuple
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _t(rng, shape, name):
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


def _primitive_cases(rng):
    for shape in [(2, 3), (4, 5), (3, 2, 4)]:
        w = rng.normal(size=shape)
        a, b = _t(rng, shape, "a"), _t(rng, shape, "b")
        yield "add", shape, lambda a, b, w=w: ((a + b) * w).sum(), [a, b]
        a, b = _t(rng, shape, "a"), _t(rng, shape, "b")
        yield "mul", shape, lambda a, b, w=w: (a * b * w).sum(), [a, b]
        a = _t(rng, shape, "x")
        yield "scale", shape, lambda a, w=w: (a * 2.5 * w).sum(), [a]
        a = _t(rng, shape, "x")
        yield "gelu", shape, lambda a, w=w: (gelu(a) * w).sum(), [a]
        a = _t(rng, shape, "x")
        yield "softmax", shape, lambda a, w=w: (softmax(a) * w).sum(), [a]
        a = _t(rng, shape, "x")
        wt = rng.normal(size=shape[::-1])
        yield "transpose", shape, lambda a, wt=wt: (transpose(a) * wt).sum(), [a]
        a = _t(rng, shape, "x")
        wr = rng.normal(size=(int(np.prod(shape)),))
        yield "reshape", shape, lambda a, wr=wr: (reshape(a, (-1,)) * wr).sum(), [a]
        d = shape[-1]
        x, g, bb = _t(rng, shape, "x"), _t(rng, (d,), "gain"), _t(rng, (d,), "bias")
        yield "layer_norm", shape, lambda x, g, bb, w=w: (layer_norm(x, g, bb) * w).sum(), [x, g, bb]
        a, b = _t(rng, shape, "a"), _t(rng, shape, "b")
        wc = rng.normal(size=(shape[0],) + shape[1:-1] + (2 * shape[-1],))
        yield "concat", shape, lambda a, b, wc=wc: (concat([a, b], axis=-1) * wc).sum(), [a, b]
    for m, p, q in [(3, 4, 2), (1, 5, 3), (4, 4, 4)]:
        a, b = _t(rng, (m, p), "a"), _t(rng, (p, q), "b")
        yield "matmul", (m, p, q), lambda a, b: matmul(a, b).sum(), [a, b]
    for rows, v in [(3, 5), (6, 2), (1, 7)]:
        logits = _t(rng, (rows, v), "logits")
        tgt = rng.integers(0, v, size=rows)
        yield "softmax_cross_entropy", (rows, v), lambda z, tgt=tgt: softmax_cross_entropy(z, tgt), [logits]
    for rows, d in [(4, 3), (7, 2), (2, 5)]:
        table = _t(rng, (rows, d), "table")
        ids = rng.integers(0, rows, size=6)
        we = rng.normal(size=(6, d))
        yield "embedding", (rows, d), lambda t, ids=ids, we=we: (take_rows(t, ids) * we).sum(), [table]


def _generator_cases(rng):
    for kind in ("direct", "linear", "lowrank", "mlp"):
        for n, d, k in [(2, 3, 4), (4, 2, 3), (1, 5, 6)]:
            g = make_generator(kind, PromptShape(n, d), k, rng=rng, rank=2, hidden=5)
            for p in g.parameters():
                p.data[...] = rng.normal(size=p.shape)
            e = TaskEmbedding("t", k, value=rng.normal(size=k))
            w = rng.normal(size=(n, d))
            inputs = g.parameters() + ([e.e] if kind != "direct" else [])
            yield f"generator:{kind}", (n, d, k), lambda *_, g=g, e=e, w=w: (g(e) * w).sum(), inputs


def _lm_cases(rng):
    cfg = LMConfig(vocab_size=24, d_model=8, n_enc_layers=2, n_dec_layers=2, n_heads=2, d_ff=12, max_len=32)
    lm = FrozenSeq2SeqLM(cfg, seed=int(rng.integers(1 << 30)))
    for n in (1, 3, 5):
        R = _t(rng, (n, 8), "R")
        ex = (list(rng.integers(4, 24, size=4)), list(rng.integers(4, 24, size=3)))
        yield "prompt->lm nll", (n, 8), lambda r, ex=ex: conditional_nll(lm, r, ex), [R]


def gradient_suite(seed: int = 0, include_lm: bool = True) -> list[GradCheck]:
    """Run every check; each entry reports the worst relative error over its inputs."""
    rng = np.random.default_rng(seed)
    cases = [*_primitive_cases(rng), *_generator_cases(rng)]
    if include_lm:
        cases.extend(_lm_cases(rng))
    results = []
    for name, shape, f, inputs in cases:
        errs = check_gradients(f, inputs)
        results.append(GradCheck(name, tuple(shape), max(errs.values())))
    return results


def run_suite(seed: int = 0) -> tuple[list[GradCheck], float]:
    t0 = time.perf_counter()
    res = gradient_suite(seed)
    return res, time.perf_counter() - t0

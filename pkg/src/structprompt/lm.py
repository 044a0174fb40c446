"""A tiny pre-LN encoder-decoder transformer used as the frozen language model.

The soft prompt is concatenated in front of the embedded encoder input, so
prompt rows occupy absolute positions ``0..n-1`` and the input tokens follow.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import vocab
from .autograd import (
    Tensor, add, concat, gelu, layer_norm, matmul, no_grad, reshape, softmax,
    softmax_cross_entropy, swapaxes, take_rows, transpose,
)

NEG_INF = -1e9


class LengthError(ValueError):
    """Prompted encoder input exceeds the model's maximum length."""


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = vocab.VOCAB_SIZE
    d_model: int = 16
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_len: int = 128

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"LMConfig.{name} must be positive, got {v}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def pad_batch(seqs, pad: int = vocab.PAD) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences; returns ids ``(B, L)`` and a validity mask."""
    L = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), L), pad, dtype=np.int64)
    valid = np.zeros((len(seqs), L), dtype=bool)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
        valid[b, : len(s)] = True
    return ids, valid


class FrozenSeq2SeqLM:
    def __init__(self, config: LMConfig | None = None, seed: int = 0):
        self.config = config or LMConfig()
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._init(np.random.default_rng(seed))
        self.frozen = False
        self.freeze()
        self._pe = sinusoidal_positions(self.config.max_len, self.config.d_model)

    # -- parameters ---------------------------------------------------------
    def _init(self, rng):
        c = self.config
        d, f = c.d_model, c.d_ff

        def p(name, shape, std):
            self.params[name] = Tensor(rng.normal(0.0, std, size=shape), name=name)

        def ln(prefix):
            self.params[f"{prefix}.g"] = Tensor(np.ones(d), name=f"{prefix}.g")
            self.params[f"{prefix}.b"] = Tensor(np.zeros(d), name=f"{prefix}.b")

        def attn(prefix):
            for w in ("q", "k", "v", "o"):
                p(f"{prefix}.w{w}", (d, d), d ** -0.5)

        p("embed", (c.vocab_size, d), 1.0)
        for i in range(c.n_enc_layers):
            ln(f"enc.{i}.ln1")
            attn(f"enc.{i}.self")
            ln(f"enc.{i}.ln2")
            p(f"enc.{i}.ff.w1", (d, f), d ** -0.5)
            p(f"enc.{i}.ff.w2", (f, d), f ** -0.5)
        ln("enc.final")
        for i in range(c.n_dec_layers):
            ln(f"dec.{i}.ln1")
            attn(f"dec.{i}.self")
            ln(f"dec.{i}.ln2")
            attn(f"dec.{i}.cross")
            ln(f"dec.{i}.ln3")
            p(f"dec.{i}.ff.w1", (d, f), d ** -0.5)
            p(f"dec.{i}.ff.w2", (f, d), f ** -0.5)
        ln("dec.final")
        p("lm_head", (d, c.vocab_size), 0.02)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> FrozenSeq2SeqLM:
        self.frozen = True
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def unfreeze(self) -> FrozenSeq2SeqLM:
        self.frozen = False
        for t in self.params.values():
            t.requires_grad = True
        return self

    def trainable_parameters(self) -> list[Tensor]:
        return [] if self.frozen else self.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing LM tensors: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {t.shape}")
            t.data[...] = arr

    # -- blocks -------------------------------------------------------------
    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray) -> Tensor:
        P = self.params
        H = self.config.n_heads
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        dh = d // H

        def heads(x, w, T):
            return transpose(reshape(matmul(x, P[w]), (B, T, H, dh)), (0, 2, 1, 3))

        q = heads(xq, f"{prefix}.wq", Tq)
        k = heads(xkv, f"{prefix}.wk", Tk)
        v = heads(xkv, f"{prefix}.wv", Tk)
        scores = matmul(q, swapaxes(k, -1, -2)) * (dh ** -0.5)
        a = softmax(scores, mask=mask)
        o = reshape(transpose(matmul(a, v), (0, 2, 1, 3)), (B, Tq, d))
        return matmul(o, P[f"{prefix}.wo"])

    def _ff(self, prefix: str, x: Tensor) -> Tensor:
        P = self.params
        return matmul(gelu(matmul(x, P[f"{prefix}.w1"])), P[f"{prefix}.w2"])

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    # -- encoder / decoder --------------------------------------------------
    def _prompt_batch(self, R, B: int) -> Tensor | None:
        if R is None:
            return None
        R = R if isinstance(R, Tensor) else Tensor(R)
        if R.ndim == 2:
            if R.shape[0] == 0:
                return None
            return add(reshape(R, (1,) + R.shape), np.zeros((B,) + R.shape))
        if R.ndim != 3 or R.shape[0] != B:
            raise ValueError(f"prompt must be (n, d) or (B, n, d) with B={B}, got {R.shape}")
        return None if R.shape[1] == 0 else R

    def encode_batch(self, R, xs) -> tuple[Tensor, np.ndarray]:
        """Encode a batch of inputs with an optional prompt.

        ``R`` is ``None``, an ``(n, d)`` prompt shared by the batch, or a
        per-example ``(B, n, d)`` stack. Returns states ``(B, n + Lx, d)`` and
        the key-validity mask ``(B, n + Lx)``.
        """
        B = len(xs)
        ids, valid = pad_batch(xs)
        Rb = self._prompt_batch(R, B)
        n = 0 if Rb is None else Rb.shape[1]
        T = n + ids.shape[1]
        longest = n + max((len(x) for x in xs), default=0)
        if longest > self.config.max_len:
            raise LengthError(f"prompted input length {longest} exceeds max_len {self.config.max_len}")
        h = take_rows(self.params["embed"], ids)
        if Rb is not None:
            h = concat([Rb, h], axis=1)
            valid = np.concatenate([np.ones((B, n), dtype=bool), valid], axis=1)
        h = h + self._pe[:T]
        mask = np.where(valid, 0.0, NEG_INF)[:, None, None, :]
        for i in range(self.config.n_enc_layers):
            x = self._ln(f"enc.{i}.ln1", h)
            h = h + self._attention(f"enc.{i}.self", x, x, mask)
            h = h + self._ff(f"enc.{i}.ff", self._ln(f"enc.{i}.ln2", h))
        return self._ln("enc.final", h), valid

    def decode_logits(self, enc: Tensor, enc_valid: np.ndarray, y_in: np.ndarray) -> Tensor:
        """Teacher-forced decoder logits ``(B, Ly, V)`` for decoder inputs ``y_in``."""
        B, Ly = y_in.shape
        causal = np.triu(np.full((Ly, Ly), NEG_INF), k=1)[None, None]
        cross = np.where(enc_valid, 0.0, NEG_INF)[:, None, None, :]
        h = take_rows(self.params["embed"], y_in) + self._pe[:Ly]
        for i in range(self.config.n_dec_layers):
            x = self._ln(f"dec.{i}.ln1", h)
            h = h + self._attention(f"dec.{i}.self", x, x, causal)
            h = h + self._attention(f"dec.{i}.cross", self._ln(f"dec.{i}.ln2", h), enc, cross)
            h = h + self._ff(f"dec.{i}.ff", self._ln(f"dec.{i}.ln3", h))
        h = self._ln("dec.final", h)
        return matmul(h, self.params["lm_head"])

    def batch_nll(self, R, xs, ys, per_example: bool = False):
        """Mean over examples of each example's mean per-token NLL.

        Targets are ``Y + [EOS]`` behind a ``BOS`` start token. With
        ``per_example`` the individual values come back as a numpy array
        (no graph).
        """
        if any(len(y) == 0 for y in ys):
            raise ValueError("target sequences must be nonempty")
        B = len(xs)
        enc, valid = self.encode_batch(R, xs)
        y_in, _ = pad_batch([[vocab.BOS] + list(y) for y in ys])
        y_out, y_valid = pad_batch([list(y) + [vocab.EOS] for y in ys])
        logits = self.decode_logits(enc, valid, y_in)
        V = logits.shape[-1]
        lengths = y_valid.sum(axis=1, keepdims=True)
        w = (y_valid / lengths / B).reshape(-1)
        flat = reshape(logits, (-1, V))
        if per_example:
            from .autograd import log_softmax_rows
            logp = log_softmax_rows(flat.data)
            tok = -logp[np.arange(len(w)), y_out.reshape(-1)].reshape(B, -1)
            return (tok * y_valid).sum(axis=1) / lengths[:, 0]
        return softmax_cross_entropy(flat, y_out.reshape(-1), w)

    def greedy_batch(self, R, xs, max_len: int, allowed: list[list[int]] | None = None) -> list[list[int]]:
        """Argmax decoding; ``allowed`` restricts output to these full sequences (EOS-terminated)."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        B = len(xs)
        with no_grad():
            enc, valid = self.encode_batch(R, xs)
            ys = np.full((B, 1), vocab.BOS, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            out: list[list[int]] = [[] for _ in range(B)]
            for step in range(max_len):
                logits = self.decode_logits(enc, valid, ys).data[:, -1, :]
                if allowed is not None:
                    logits = _constrain(logits, out, allowed)
                nxt = logits.argmax(axis=-1)  # first max, i.e. lowest id on ties
                for b in range(B):
                    if done[b]:
                        continue
                    if nxt[b] == vocab.EOS:
                        done[b] = True
                    else:
                        out[b].append(int(nxt[b]))
                if done.all():
                    break
                ys = np.concatenate([ys, np.where(done, vocab.PAD, nxt)[:, None]], axis=1)
        return out


def _constrain(logits: np.ndarray, prefixes: list[list[int]], allowed: list[list[int]]) -> np.ndarray:
    out = np.full_like(logits, -np.inf)
    for b, pre in enumerate(prefixes):
        k = len(pre)
        nxt = {seq[k] for seq in allowed if len(seq) > k and seq[:k] == pre}
        if not nxt:
            nxt = {vocab.EOS}
        idx = sorted(nxt)
        out[b, idx] = logits[b, idx]
    return out


# -- single-example operations ------------------------------------------------

def encode_with_prompt(lm: FrozenSeq2SeqLM, R, X) -> Tensor:
    """Encoder states ``(n + |X|, d)`` for one input with prompt ``R``."""
    states, _ = lm.encode_batch(R, [list(X)])
    return reshape(states, states.shape[1:])


def conditional_nll(lm: FrozenSeq2SeqLM, R, example) -> Tensor:
    X, Y = _xy(example)
    return lm.batch_nll(R, [X], [Y])


def greedy_decode(lm: FrozenSeq2SeqLM, R, X, max_len: int) -> list[int]:
    return lm.greedy_batch(R, [list(X)], max_len)[0]


def freeze(lm: FrozenSeq2SeqLM) -> FrozenSeq2SeqLM:
    return lm.freeze()


def unfreeze(lm: FrozenSeq2SeqLM) -> FrozenSeq2SeqLM:
    return lm.unfreeze()


def _xy(example):
    if hasattr(example, "X"):
        return list(example.X), list(example.Y)
    X, Y = example
    return list(X), list(Y)

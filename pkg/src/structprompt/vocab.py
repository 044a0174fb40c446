"""Fixed byte-level vocabulary shared by the toy LM and the synthetic tasks."""

VOCAB_SIZE = 256
PAD, BOS, EOS = 0, 1, 2
# Discrete task markers used only while pre-training the frozen LM.
TAG_BASE = 3
N_TAGS = 16
SPECIAL = frozenset(range(TAG_BASE + N_TAGS))


def encode(text: str) -> list[int]:
    ids = list(text.encode("latin-1"))
    if any(i in SPECIAL for i in ids):
        raise ValueError(f"text {text!r} contains reserved control bytes")
    return ids


def decode(ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i not in SPECIAL:
            out.append(i)
    return bytes(out).decode("latin-1")


def tag_token(index: int) -> int:
    if not 0 <= index < N_TAGS:
        raise ValueError(f"tag index {index} outside [0, {N_TAGS})")
    return TAG_BASE + index

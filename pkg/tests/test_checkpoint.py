import numpy as np
import pytest

from structprompt.checkpoint import (
    MAGIC, CheckpointFormatError, CheckpointTruncatedError, encode_checkpoint, load_checkpoint, save_checkpoint,
)


@pytest.fixture
def tensors():
    rng = np.random.default_rng(0)
    return {
        "gen/W": rng.normal(size=(6, 4)),
        "task/copy": rng.normal(size=4),
        "odd": np.array([np.pi, -0.0, 1e-310, np.finfo(float).max]),
        "scalar": np.array(3.5),
    }


def test_round_trip_bit_exact(tmp_path, tensors):
    path = save_checkpoint(tmp_path / "a.ckpt", tensors, {"lr": 0.1}, seed=7, extra={"step": 3})
    ck = load_checkpoint(path)
    assert ck.seed == 7 and ck.config == {"lr": 0.1} and ck.extra == {"step": 3}
    assert list(ck.tensors) == list(tensors)
    for k, v in tensors.items():
        assert ck.tensors[k].shape == v.shape
        assert ck.tensors[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()


def test_every_single_byte_flip_detected(tmp_path, tensors):
    raw = encode_checkpoint({"w": tensors["gen/W"][:2]}, {"a": 1}, seed=1)
    path = tmp_path / "c.ckpt"
    for i in range(len(raw)):
        bad = bytearray(raw)
        bad[i] ^= 0x01
        path.write_bytes(bytes(bad))
        with pytest.raises((CheckpointFormatError, CheckpointTruncatedError, UnicodeDecodeError, ValueError)):
            load_checkpoint(path)


def test_payload_flip_is_checksum_error(tmp_path, tensors):
    raw = bytearray(encode_checkpoint(tensors))
    raw[-6] ^= 0xFF  # inside the last tensor's data
    (tmp_path / "x").write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="checksum"):
        load_checkpoint(tmp_path / "x")


def test_bad_magic_and_version(tmp_path, tensors):
    raw = encode_checkpoint(tensors)
    (tmp_path / "m").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(tmp_path / "m")
    (tmp_path / "v").write_bytes(MAGIC + (2).to_bytes(4, "little") + raw[12:])
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(tmp_path / "v")


def test_truncation_reports_offset(tmp_path, tensors):
    raw = encode_checkpoint(tensors)
    (tmp_path / "t").write_bytes(raw[:100])
    with pytest.raises(CheckpointTruncatedError) as info:
        load_checkpoint(tmp_path / "t")
    assert isinstance(info.value, OSError)
    assert info.value.offset <= 100

import numpy as np
import pytest

from app.exceptions import BadMagicError, MalformedMessageError, TruncatedMessageError, UnsupportedVersionError
from app.model.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint


def test_round_trip_preserves_every_tensor(tiny_model, tmp_path):
    path = save_checkpoint(tiny_model, tmp_path / "ckpt" / "model.tsfl")
    loaded = load_checkpoint(path)
    assert loaded.config == tiny_model.config
    for (name, a), (other, b) in zip(tiny_model.named_tensors(), loaded.named_tensors()):
        assert name == other
        assert np.array_equal(a, b), name


def test_size_matches_tensor_count(tiny_model):
    buf = encode_checkpoint(tiny_model)
    floats = sum(t.size for _, t in tiny_model.named_tensors())
    assert len(buf) == 4 + 2 + 8 * 2 + 1 + 3 * 8 + 8 * floats


def test_rejects_bad_magic(tiny_model):
    buf = bytearray(encode_checkpoint(tiny_model))
    buf[:4] = b"NOPE"
    with pytest.raises(BadMagicError):
        decode_checkpoint(bytes(buf))


def test_rejects_unknown_version(tiny_model):
    buf = bytearray(encode_checkpoint(tiny_model))
    buf[4] = 9
    with pytest.raises(UnsupportedVersionError):
        decode_checkpoint(bytes(buf))


def test_rejects_truncated_and_padded_buffers(tiny_model):
    buf = encode_checkpoint(tiny_model)
    with pytest.raises(TruncatedMessageError):
        decode_checkpoint(buf[:-8])
    with pytest.raises(TruncatedMessageError):
        decode_checkpoint(buf[:10])
    with pytest.raises(MalformedMessageError):
        decode_checkpoint(buf + b"\x00")

from pathlib import Path

import numpy as np
import pytest

from app.compression import cls_scores, dequantize, quantize, refine
from app.compression.quantizer import QuantizedActivations
from app.exceptions import (
    BadMagicError,
    CodeOverflowError,
    DecodeError,
    MalformedMessageError,
    TruncatedMessageError,
    UnsupportedVersionError,
)
from app.model.params import LoraAdapter
from app.numeric.rng import Rng
from app.wire import (
    ActivationMeta,
    MessageMeta,
    decode_activations,
    decode_adapters,
    decode_gradient,
    decode_raw_activations,
    encode_activations,
    encode_adapters,
    encode_gradient,
    encode_raw_activations,
    inspect_message,
)
from app.wire.codec import pack_codes, unpack_codes
from app.wire.goldens import golden_activation_messages

GOLDEN_DIR = Path(__file__).parent / "goldens"


@pytest.fixture
def golden():
    return (GOLDEN_DIR / "q2_single_token.tsfa").read_bytes()


@pytest.mark.parametrize("name", ["q2_single_token", "empty_batch"])
def test_encoder_reproduces_stored_goldens(name):
    assert golden_activation_messages()[name] == (GOLDEN_DIR / f"{name}.tsfa").read_bytes()


def test_decode_single_token_golden(golden):
    qa, indices, meta = decode_activations(golden)
    assert meta.round == 1 and meta.client == 2 and meta.M == 2 and meta.merged_present
    assert indices.tolist() == [[2]]
    assert qa.q == 2 and qa.a_min == 0.0 and qa.a_max == 3.0
    assert qa.codes.reshape(-1).tolist() == [3, 2, 1, 0, 1, 3]
    assert dequantize(qa).reshape(-1).tolist() == [-3.0, 2.0, -1.0, 0.0, 1.0, 3.0]


def test_decode_empty_batch_golden():
    qa, indices, meta = decode_activations((GOLDEN_DIR / "empty_batch.tsfa").read_bytes())
    assert qa.shape == (0, 3, 4)
    assert indices.shape == (0, 1)
    assert meta.M == 4 and qa.q == 8


def test_quantized_refinement_survives_the_wire():
    rng = Rng(1)
    acts = rng.normal(1.0, (3, 8, 5))
    ref = refine(acts, cls_scores(rng.normal(1.0, (3, 7))), 4)
    qa = quantize(ref.tokens, 4, Rng(2))
    meta = ActivationMeta(round=7, client=3, M=7, merged_present=ref.merged_present)
    buf = encode_activations(qa, ref.indices, meta)
    rx, indices, rx_meta = decode_activations(buf)
    assert rx_meta == meta
    assert np.array_equal(indices, ref.indices)
    assert np.array_equal(rx.codes, qa.codes)
    assert np.array_equal(rx.signs, qa.signs)
    assert np.array_equal(dequantize(rx), dequantize(qa))
    assert encode_activations(rx, indices, rx_meta) == buf


@pytest.mark.parametrize("q", [2, 4, 8])
def test_random_messages_survive_the_wire(q):
    rng = Rng(100, q)
    for trial in range(1000):
        b = int(rng.integers(0, 4))
        m = int(rng.integers(1, 12))
        k = int(rng.integers(1, m + 1))
        d = int(rng.integers(1, 7))
        qa = quantize(rng.normal(2.0, (b, k + 2, d)), q, rng.child(trial))
        indices = np.array([np.sort(rng.choice(m, k)) + 1 for _ in range(b)], dtype=np.int64)
        meta = ActivationMeta(
            round=int(rng.integers(0, 2**32)), client=int(rng.integers(0, 2**16)), M=m,
            merged_present=k < m,
        )
        buf = encode_activations(qa, indices.reshape(b, k), meta)
        rx, rx_indices, rx_meta = decode_activations(buf)
        assert rx_meta == meta
        assert np.array_equal(rx_indices, indices.reshape(b, k))
        assert np.array_equal(rx.codes, qa.codes) and np.array_equal(rx.signs, qa.signs)
        assert (rx.a_min, rx.a_max, rx.q) == (qa.a_min, qa.a_max, qa.q)
        assert encode_activations(rx, rx_indices, rx_meta) == buf


@pytest.mark.parametrize("q", [2, 4, 8, 16, 32])
def test_code_packing_is_lsb_first(q):
    codes = np.array([1, 2**q - 1, 0], dtype=np.uint64)
    buf = pack_codes(codes, q)
    assert len(buf) == (3 * q + 7) // 8
    assert buf[0] & 1 == 1
    assert unpack_codes(buf, 3, q).tolist() == codes.tolist()


def test_rejects_truncated_buffer(golden):
    for cut in (0, 3, 10, 29, 34):
        with pytest.raises(TruncatedMessageError):
            decode_activations(golden[:cut])


def test_rejects_trailing_bytes(golden):
    with pytest.raises(MalformedMessageError):
        decode_activations(golden + b"\x00")


def test_rejects_bad_magic(golden):
    with pytest.raises(BadMagicError):
        decode_activations(b"XXXX" + golden[4:])
    with pytest.raises(BadMagicError):
        decode_gradient(golden)


def test_rejects_unknown_version(golden):
    buf = bytearray(golden)
    buf[4] = 2
    with pytest.raises(UnsupportedVersionError):
        decode_activations(bytes(buf))


@pytest.mark.parametrize(
    "offset, value",
    [
        (20, 3),  # bit-width outside the allowed set
        (21, 0),  # merged flag off while K < M
        (21, 2),  # flag that is not 0 or 1
        (30, 0),  # index 0 is the CLS position
        (30, 3),  # index beyond M
        (34, 0x1D),  # padding bit set after the last code
        (32, 0x45),  # padding bit set after the last sign
    ],
)
def test_rejects_inconsistent_fields(golden, offset, value):
    buf = bytearray(golden)
    buf[offset] = value
    with pytest.raises(MalformedMessageError):
        decode_activations(bytes(buf))


def test_rejects_inverted_range(golden):
    buf = bytearray(golden)
    buf[22:26] = np.float32(4.0).tobytes()
    with pytest.raises(MalformedMessageError):
        decode_activations(bytes(buf))


def test_encoder_rejects_overflowing_codes():
    qa = QuantizedActivations(
        codes=np.full((1, 3, 1), 4, dtype=np.uint64),
        signs=np.zeros((1, 3, 1), dtype=bool),
        a_min=0.0,
        a_max=1.0,
        q=2,
    )
    with pytest.raises(CodeOverflowError):
        encode_activations(qa, np.array([[1]]), ActivationMeta(M=2))


def test_encoder_rejects_unsorted_indices():
    qa = quantize(np.ones((1, 4, 1)), 8, Rng(0))
    with pytest.raises(MalformedMessageError):
        encode_activations(qa, np.array([[3, 2]]), ActivationMeta(M=4))


def test_gradient_round_trip_is_f32():
    grad = Rng(3).normal(1.0, (2, 4, 3))
    meta = ActivationMeta(round=1, client=1, M=5, merged_present=True)
    values, rx_meta = decode_gradient(encode_gradient(grad, meta))
    assert rx_meta == meta
    assert np.array_equal(values, grad.astype(np.float32).astype(np.float64))


def test_raw_activations_round_trip():
    acts = Rng(4).normal(1.0, (2, 5, 3))
    meta = MessageMeta(round=2, client=9)
    exact, rx_meta, precision = decode_raw_activations(encode_raw_activations(acts, meta, 64))
    assert np.array_equal(exact, acts) and precision == 64 and rx_meta == meta
    single, _, precision = decode_raw_activations(encode_raw_activations(acts, meta, 32))
    assert precision == 32
    assert np.array_equal(single, acts.astype(np.float32).astype(np.float64))


def test_raw_rejects_unknown_precision():
    with pytest.raises(MalformedMessageError):
        encode_raw_activations(np.zeros((1, 1, 1)), MessageMeta(), 16)


def test_adapter_round_trip():
    rng = Rng(5)
    adapters = [LoraAdapter(U=rng.normal(1.0, (6, 2)), V=rng.normal(1.0, (2, 6))) for _ in range(3)]
    decoded, meta = decode_adapters(encode_adapters(adapters, MessageMeta(round=4, client=1)))
    assert meta.round == 4 and len(decoded) == 3
    for a, b in zip(adapters, decoded):
        assert np.array_equal(b.U, a.U.astype(np.float32).astype(np.float64))
        assert np.array_equal(b.V, a.V.astype(np.float32).astype(np.float64))


def test_inspect_reports_header(golden):
    info = inspect_message(golden)
    assert info["magic"] == "TSFA"
    assert info["bytes"] == 35
    assert (info["B"], info["K"], info["D"], info["M"], info["q"]) == (1, 1, 2, 2, 2)
    with pytest.raises(BadMagicError):
        inspect_message(b"ABCD")


def test_mutated_messages_only_raise_decode_errors(golden):
    """Random truncations and byte flips never escape the decode error family."""
    rng = Rng(6)
    grad = encode_gradient(np.ones((1, 3, 2)), ActivationMeta(M=2))
    raw = encode_raw_activations(np.ones((1, 3, 2)), MessageMeta())
    adapters = encode_adapters([LoraAdapter.zeros(4, 2)], MessageMeta())
    seeds = [golden, grad, raw, adapters]
    for trial in range(2000):
        buf = bytearray(seeds[trial % len(seeds)])
        if rng.uniform() < 0.3:
            buf = buf[: int(rng.integers(0, len(buf) + 1))]
        for _ in range(int(rng.integers(1, 4))):
            if buf:
                buf[int(rng.integers(0, len(buf)))] = int(rng.integers(0, 256))
        try:
            inspect_message(bytes(buf))
        except DecodeError:
            pass

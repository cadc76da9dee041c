"""Little-endian binary messages exchanged between devices and the server.

``TSFA`` activation message::

    header  magic "TSFA" | version u16 | round u32 | client u16 | B u16 | K u16
            | D u16 | M u16 | q u8 | merged_present u8 | a_min f32 | a_max f32
    indices B*K u16, 1-based patch positions, ascending per sample
    signs   ceil(B(K+2)D / 8) bytes, bit j (LSB first) set when entry j < 0
    codes   ceil(B(K+2)D q / 8) bytes, entry j occupies bits [jq, jq+q), LSB first

``TSFG`` gradient message: the same header (q = 32, a_min = a_max = 0)
followed by B(K+2)D f32 values. A gradient over the full M+1 tokens is sent
with K = M-1.

``TSFR`` raw activation message (uncompressed split baseline)::

    magic | version u16 | round u32 | client u16 | B u16 | L u16 | D u16
    | precision u8 (32 or 64) | B*L*D floats

``TSFU`` adapter message::

    magic | version u16 | round u32 | client u16 | n_blocks u16 | D u16 | r u16
    | per block U (D x r) then V (r x D), f32

Unused bits in the last byte of a bitmap or code stream must be zero, and no
bytes may follow a message, so every accepted buffer re-encodes to itself.
"""

import math
import struct
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.compression.quantizer import QuantizedActivations
from app.exceptions import (
    BadMagicError,
    CodeOverflowError,
    MalformedMessageError,
    TruncatedMessageError,
    UnsupportedVersionError,
)
from app.model.params import LoraAdapter
from app.schema import ALLOWED_BITS


WIRE_VERSION = 1

ACTIVATION_MAGIC = b"TSFA"
GRADIENT_MAGIC = b"TSFG"
RAW_MAGIC = b"TSFR"
ADAPTER_MAGIC = b"TSFU"

_TENSOR_HEADER = struct.Struct("<4sHIHHHHHBBff")
_RAW_HEADER = struct.Struct("<4sHIHHHHB")
_ADAPTER_HEADER = struct.Struct("<4sHIHHHH")

_U16 = 0xFFFF
_U32 = 0xFFFFFFFF


class MessageMeta(BaseModel):
    """Routing fields shared by every message."""

    round: int = Field(0, ge=0, le=_U32)
    client: int = Field(0, ge=0, le=_U16)


class ActivationMeta(MessageMeta):
    M: int = Field(..., ge=1, le=_U16)
    merged_present: bool = True


def _u16(name: str, value: int) -> int:
    if not 0 <= value <= _U16:
        raise MalformedMessageError(f"{name}={value} does not fit in u16")
    return value


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def _unpack_bits(buf: bytes, count: int, what: str) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little")
    if bits[count:].any():
        raise MalformedMessageError(f"nonzero padding bits after {what}")
    return bits[:count]


def pack_codes(codes: np.ndarray, q: int) -> bytes:
    flat = np.asarray(codes, dtype=np.uint64).reshape(-1)
    if flat.size and int(flat.max()) >= 2**q:
        raise CodeOverflowError(f"code {int(flat.max())} does not fit in {q} bits")
    shifts = np.arange(q, dtype=np.uint64)
    bits = (flat[:, None] >> shifts) & np.uint64(1)
    return _pack_bits(bits)


def unpack_codes(buf: bytes, n: int, q: int) -> np.ndarray:
    bits = _unpack_bits(buf, n * q, "codes").reshape(n, q).astype(np.uint64)
    return (bits << np.arange(q, dtype=np.uint64)).sum(axis=1, dtype=np.uint64)


def _split(buf: bytes, sizes: Sequence[int], start: int) -> List[bytes]:
    """Cut ``buf[start:]`` into consecutive fields, rejecting short or long buffers."""
    need = start + sum(sizes)
    if len(buf) < need:
        raise TruncatedMessageError(f"message is {len(buf)} bytes, header implies {need}")
    if len(buf) > need:
        raise MalformedMessageError(f"{len(buf) - need} trailing bytes after message")
    out, pos = [], start
    for size in sizes:
        out.append(bytes(buf[pos : pos + size]))
        pos += size
    return out


def _read_header(buf: bytes, layout: struct.Struct, magic: bytes) -> Tuple[Any, ...]:
    if len(buf) < 4:
        raise TruncatedMessageError(f"{len(buf)} bytes is shorter than a magic")
    if bytes(buf[:4]) != magic:
        raise BadMagicError(f"expected magic {magic!r}, got {bytes(buf[:4])!r}")
    if len(buf) < layout.size:
        raise TruncatedMessageError(
            f"{magic.decode()} header needs {layout.size} bytes, got {len(buf)}"
        )
    fields = layout.unpack_from(buf)
    if fields[1] != WIRE_VERSION:
        raise UnsupportedVersionError(
            f"{magic.decode()} version {fields[1]} (supported: {WIRE_VERSION})"
        )
    return fields


def _f32(name: str, value: float) -> float:
    as32 = np.float32(value)
    if float(as32) != value:
        raise MalformedMessageError(f"{name}={value!r} is not representable as f32")
    return value


def encode_activations(
    qa: QuantizedActivations, indices: np.ndarray, meta: ActivationMeta
) -> bytes:
    codes = np.asarray(qa.codes)
    if codes.ndim != 3:
        raise MalformedMessageError(f"codes must be [B, K+2, D], got {codes.shape}")
    b, length, d = codes.shape
    k = length - 2
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape != (b, k):
        raise MalformedMessageError(
            f"indices shape {indices.shape} does not match codes {codes.shape}"
        )
    if qa.q not in ALLOWED_BITS:
        raise MalformedMessageError(f"bit-width q={qa.q} not in {ALLOWED_BITS}")
    _check_activation_fields(k, meta.M, int(meta.merged_present), qa.a_min, qa.a_max)
    _check_indices(indices, meta.M)

    header = _TENSOR_HEADER.pack(
        ACTIVATION_MAGIC,
        WIRE_VERSION,
        meta.round,
        meta.client,
        _u16("B", b),
        _u16("K", k),
        _u16("D", d),
        meta.M,
        qa.q,
        int(meta.merged_present),
        _f32("a_min", qa.a_min),
        _f32("a_max", qa.a_max),
    )
    return b"".join(
        [
            header,
            indices.astype("<u2").tobytes(),
            _pack_bits(np.asarray(qa.signs, dtype=bool)),
            pack_codes(codes, qa.q),
        ]
    )


def _check_activation_fields(k: int, m: int, merged: int, a_min: float, a_max: float) -> None:
    if not 1 <= k <= m:
        raise MalformedMessageError(f"token budget K={k} outside [1, M={m}]")
    if merged not in (0, 1):
        raise MalformedMessageError(f"merged_present={merged} is not a flag")
    if bool(merged) != (k < m):
        raise MalformedMessageError(f"merged_present={merged} inconsistent with K={k}, M={m}")
    if not (math.isfinite(a_min) and math.isfinite(a_max)):
        raise MalformedMessageError("quantization range is not finite")
    if a_min < 0 or a_min > a_max:
        raise MalformedMessageError(f"invalid quantization range [{a_min}, {a_max}]")


def _check_indices(indices: np.ndarray, m: int) -> None:
    if indices.size == 0:
        return
    if indices.min() < 1 or indices.max() > m:
        raise MalformedMessageError(f"token index outside [1, {m}]")
    if indices.shape[1] > 1 and np.any(np.diff(indices, axis=1) <= 0):
        raise MalformedMessageError("token indices are not strictly increasing")


def decode_activations(buf: bytes) -> Tuple[QuantizedActivations, np.ndarray, ActivationMeta]:
    _, _, rnd, client, b, k, d, m, q, merged, a_min, a_max = _read_header(
        buf, _TENSOR_HEADER, ACTIVATION_MAGIC
    )
    if q not in ALLOWED_BITS:
        raise MalformedMessageError(f"bit-width q={q} not in {ALLOWED_BITS}")
    _check_activation_fields(k, m, merged, a_min, a_max)

    n = b * (k + 2) * d
    idx_raw, sign_raw, code_raw = _split(
        buf, [2 * b * k, math.ceil(n / 8), math.ceil(n * q / 8)], _TENSOR_HEADER.size
    )
    indices = np.frombuffer(idx_raw, dtype="<u2").astype(np.int64).reshape(b, k)
    _check_indices(indices, m)
    signs = _unpack_bits(sign_raw, n, "signs").astype(bool).reshape(b, k + 2, d)
    codes = unpack_codes(code_raw, n, q).reshape(b, k + 2, d)
    if a_min == a_max and codes.any():
        raise MalformedMessageError("nonzero codes in a message with an empty range")

    qa = QuantizedActivations(
        codes=codes, signs=signs, a_min=float(a_min), a_max=float(a_max), q=q
    )
    meta = ActivationMeta(round=rnd, client=client, M=m, merged_present=bool(merged))
    return qa, indices, meta


def encode_gradient(grad: np.ndarray, meta: ActivationMeta) -> bytes:
    """Gradient w.r.t. a ``[B, K+2, D]`` token sequence, as f32."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 3 or grad.shape[1] < 2:
        raise MalformedMessageError(f"gradient must be [B, K+2, D], got {grad.shape}")
    b, length, d = grad.shape
    k = length - 2
    if k > meta.M:
        raise MalformedMessageError(f"gradient covers {length} tokens, M={meta.M}")
    header = _TENSOR_HEADER.pack(
        GRADIENT_MAGIC, WIRE_VERSION, meta.round, meta.client,
        _u16("B", b), _u16("K", k), _u16("D", d), meta.M,
        32, int(meta.merged_present), 0.0, 0.0,
    )
    return header + grad.astype("<f4").tobytes()


def decode_gradient(buf: bytes) -> Tuple[np.ndarray, ActivationMeta]:
    _, _, rnd, client, b, k, d, m, q, merged, a_min, a_max = _read_header(
        buf, _TENSOR_HEADER, GRADIENT_MAGIC
    )
    if q != 32 or a_min != 0.0 or a_max != 0.0:
        raise MalformedMessageError("gradient header must carry q=32 and a zero range")
    if m < 1 or k > m or merged not in (0, 1):
        raise MalformedMessageError(f"inconsistent gradient header K={k}, M={m}")
    (payload,) = _split(buf, [4 * b * (k + 2) * d], _TENSOR_HEADER.size)
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(b, k + 2, d)
    if not np.all(np.isfinite(values)):
        raise MalformedMessageError("gradient payload holds non-finite values")
    return values, ActivationMeta(round=rnd, client=client, M=m, merged_present=bool(merged))


def encode_raw_activations(acts: np.ndarray, meta: MessageMeta, precision: int = 32) -> bytes:
    if precision not in (32, 64):
        raise MalformedMessageError(f"raw precision must be 32 or 64, got {precision}")
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim != 3:
        raise MalformedMessageError(f"activations must be [B, L, D], got {acts.shape}")
    b, length, d = acts.shape
    header = _RAW_HEADER.pack(
        RAW_MAGIC, WIRE_VERSION, meta.round, meta.client,
        _u16("B", b), _u16("L", length), _u16("D", d), precision,
    )
    return header + acts.astype("<f4" if precision == 32 else "<f8").tobytes()


def decode_raw_activations(buf: bytes) -> Tuple[np.ndarray, MessageMeta, int]:
    _, _, rnd, client, b, length, d, precision = _read_header(buf, _RAW_HEADER, RAW_MAGIC)
    if precision not in (32, 64):
        raise MalformedMessageError(f"raw precision must be 32 or 64, got {precision}")
    width = precision // 8
    (payload,) = _split(buf, [width * b * length * d], _RAW_HEADER.size)
    dtype = "<f4" if precision == 32 else "<f8"
    values = np.frombuffer(payload, dtype=dtype).astype(np.float64).reshape(b, length, d)
    if not np.all(np.isfinite(values)):
        raise MalformedMessageError("raw payload holds non-finite values")
    return values, MessageMeta(round=rnd, client=client), precision


def encode_adapters(adapters: Sequence[LoraAdapter], meta: MessageMeta) -> bytes:
    if not adapters:
        raise MalformedMessageError("adapter message needs at least one block")
    d, r = adapters[0].U.shape
    for a in adapters:
        if a.U.shape != (d, r) or a.V.shape != (r, d):
            raise MalformedMessageError("adapter blocks have mismatched shapes")
    header = _ADAPTER_HEADER.pack(
        ADAPTER_MAGIC, WIRE_VERSION, meta.round, meta.client,
        _u16("n_blocks", len(adapters)), _u16("D", d), _u16("r", r),
    )
    body = b"".join(
        a.U.astype("<f4").tobytes() + a.V.astype("<f4").tobytes() for a in adapters
    )
    return header + body


def decode_adapters(buf: bytes) -> Tuple[Tuple[LoraAdapter, ...], MessageMeta]:
    _, _, rnd, client, n_blocks, d, r = _read_header(buf, _ADAPTER_HEADER, ADAPTER_MAGIC)
    per_block = 4 * 2 * d * r
    parts = _split(buf, [per_block] * n_blocks, _ADAPTER_HEADER.size)
    adapters = []
    for part in parts:
        values = np.frombuffer(part, dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise MalformedMessageError("adapter payload holds non-finite values")
        adapters.append(
            LoraAdapter(U=values[: d * r].reshape(d, r), V=values[d * r :].reshape(r, d))
        )
    return tuple(adapters), MessageMeta(round=rnd, client=client)


_DECODERS = {
    ACTIVATION_MAGIC: decode_activations,
    GRADIENT_MAGIC: decode_gradient,
    RAW_MAGIC: decode_raw_activations,
    ADAPTER_MAGIC: decode_adapters,
}


def inspect_message(buf: bytes) -> Dict[str, Any]:
    """Decode any message kind and summarise its header fields."""
    magic = bytes(buf[:4])
    if magic not in _DECODERS:
        raise BadMagicError(f"unknown magic {magic!r}")
    decoded = _DECODERS[magic](buf)
    summary: Dict[str, Any] = {"magic": magic.decode(), "version": WIRE_VERSION, "bytes": len(buf)}
    if magic == ACTIVATION_MAGIC:
        qa, indices, meta = decoded
        b, length, d = qa.shape
        summary.update(
            meta.model_dump(), B=b, K=length - 2, D=d, q=qa.q, a_min=qa.a_min, a_max=qa.a_max
        )
    elif magic == GRADIENT_MAGIC:
        values, meta = decoded
        summary.update(meta.model_dump(), shape=list(values.shape))
    elif magic == RAW_MAGIC:
        values, meta, precision = decoded
        summary.update(meta.model_dump(), shape=list(values.shape), precision=precision)
    else:
        adapters, meta = decoded
        summary.update(
            meta.model_dump(), n_blocks=len(adapters), D=adapters[0].U.shape[0] if adapters else 0,
            r=adapters[0].U.shape[1] if adapters else 0,
        )
    return summary

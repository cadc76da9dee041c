"""Bit accounting for activation traffic.

Payload is the quantized values alone. Header, indices and sign bits are
metadata, so the encoded size of an activation message is
``metadata_bits + 8 * ceil(payload_bits / 8)``.
"""

import math


ACTIVATION_HEADER_BYTES = 30
RAW_HEADER_BYTES = 19
ADAPTER_HEADER_BYTES = 18


def _check_dims(**dims: int) -> None:
    for name, value in dims.items():
        if value < 0:
            raise ValueError(f"{name} must be non-negative, got {value}")


def payload_bits(B: int, K: int, D: int, q: int) -> int:
    """``B (K+2) D q``: the quantized values of one activation message."""
    _check_dims(B=B, K=K, D=D, q=q)
    return B * (K + 2) * D * q


def metadata_bits(B: int, K: int, D: int) -> int:
    """Header, u16 indices and byte-padded sign bitmap of one activation message."""
    _check_dims(B=B, K=K, D=D)
    return 8 * ACTIVATION_HEADER_BYTES + 16 * B * K + 8 * math.ceil(B * (K + 2) * D / 8)


def activation_message_bytes(B: int, K: int, D: int, q: int) -> int:
    return (metadata_bits(B, K, D) + 8 * math.ceil(payload_bits(B, K, D, q) / 8)) // 8


def gradient_message_bytes(B: int, K: int, D: int) -> int:
    return ACTIVATION_HEADER_BYTES + 4 * B * (K + 2) * D


def raw_message_bytes(B: int, L: int, D: int, precision: int = 32) -> int:
    _check_dims(B=B, L=L, D=D)
    return RAW_HEADER_BYTES + (precision // 8) * B * L * D


def adapter_message_bytes(n_blocks: int, D: int, r: int) -> int:
    return ADAPTER_HEADER_BYTES + n_blocks * 4 * (D * r + r * D)


def compression_ratio(K: int, q: int, M: int) -> float:
    """Compressed over FP32 uncompressed payload: ``q (K+2) / (32 (M+1))``."""
    if K < 1 or q < 1 or M < 1:
        raise ValueError(f"compression_ratio needs positive arguments, got K={K}, q={q}, M={M}")
    return q * (K + 2) / (32.0 * (M + 1))

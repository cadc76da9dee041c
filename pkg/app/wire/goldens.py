"""Canonical ``.tsfa`` vectors checked byte-for-byte by the test suite."""

from pathlib import Path
from typing import Dict

import numpy as np

from app.compression.quantizer import QuantizedActivations
from app.logger import logger
from app.wire.codec import ActivationMeta, encode_activations


def golden_activation_messages() -> Dict[str, bytes]:
    """Name -> encoded bytes for each canonical activation message.

    ``q2_single_token``: B=1, K=1, D=2, M=2, range [0, 3], values
    ``[-3, 2, -1, 0, 1, 3]`` so codes are ``[3, 2, 1, 0, 1, 3]``.
    ``empty_batch``: a header-only B=0 message.
    """
    single = QuantizedActivations(
        codes=np.array([3, 2, 1, 0, 1, 3], dtype=np.uint64).reshape(1, 3, 2),
        signs=np.array([1, 0, 1, 0, 0, 0], dtype=bool).reshape(1, 3, 2),
        a_min=0.0,
        a_max=3.0,
        q=2,
    )
    empty = QuantizedActivations(
        codes=np.zeros((0, 3, 4), dtype=np.uint64),
        signs=np.zeros((0, 3, 4), dtype=bool),
        a_min=0.0,
        a_max=0.0,
        q=8,
    )
    return {
        "q2_single_token": encode_activations(
            single, np.array([[2]]), ActivationMeta(round=1, client=2, M=2, merged_present=True)
        ),
        "empty_batch": encode_activations(
            empty, np.zeros((0, 1), dtype=np.int64), ActivationMeta(M=4, merged_present=True)
        ),
    }


def write_goldens(directory: Path) -> Dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, buf in golden_activation_messages().items():
        path = directory / f"{name}.tsfa"
        path.write_bytes(buf)
        written[name] = path
        logger.info(f"Wrote {len(buf)}-byte golden {path}")
    return written

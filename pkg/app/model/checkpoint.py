"""``TSFL`` checkpoint files.

Layout (little-endian)::

    magic "TSFL" | version u16 | E D M H r C e patch_dim (u16 each)
    | lora_site u8 | lora_scale f64 | init_std f64 | ln_eps f64
    | every tensor of SplitModel.named_tensors() as f64, row-major
"""

import struct
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import ValidationError

from app.config import ModelConfig
from app.exceptions import (
    BadMagicError,
    MalformedMessageError,
    TruncatedMessageError,
    UnsupportedVersionError,
)
from app.logger import logger
from app.model.params import SplitModel, assemble, tensor_shapes
from app.schema import LORA_SITE_CODES, LoraSite


MAGIC = b"TSFL"
VERSION = 1
_HEADER = struct.Struct("<4sH8HBddd")
_SITES = {code: site for site, code in LORA_SITE_CODES.items()}
_DIMS = ("E", "D", "M", "H", "r", "C", "e", "patch_dim")


def encode_checkpoint(model: SplitModel) -> bytes:
    cfg = model.config
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        *(getattr(cfg, name) for name in _DIMS),
        LORA_SITE_CODES[LoraSite(cfg.lora_site)],
        cfg.lora_scale,
        cfg.init_std,
        cfg.ln_eps,
    )
    body = b"".join(
        np.ascontiguousarray(t, dtype="<f8").tobytes() for _, t in model.named_tensors()
    )
    return header + body


def decode_checkpoint(buf: bytes) -> SplitModel:
    if len(buf) < _HEADER.size:
        raise TruncatedMessageError(
            f"checkpoint needs a {_HEADER.size}-byte header, got {len(buf)} bytes"
        )
    magic, version, *rest = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} (supported: {VERSION})")
    dims = dict(zip(_DIMS, rest[:8]))
    site_code, scale, init_std, ln_eps = rest[8:]
    if site_code not in _SITES:
        raise MalformedMessageError(f"unknown LoRA site code {site_code}")
    try:
        cfg = ModelConfig(
            **dims,
            lora_site=_SITES[site_code],
            lora_scale=scale,
            init_std=init_std,
            ln_eps=ln_eps,
        )
    except ValidationError as e:
        raise MalformedMessageError(f"checkpoint header is not a valid model config: {e}") from e

    shapes = tensor_shapes(cfg)
    expected = _HEADER.size + 8 * sum(int(np.prod(s)) for _, s in shapes)
    if len(buf) < expected:
        raise TruncatedMessageError(f"checkpoint is {len(buf)} bytes, header implies {expected}")
    if len(buf) > expected:
        raise MalformedMessageError(f"{len(buf) - expected} trailing bytes after checkpoint")

    tensors = {}
    offset = _HEADER.size
    for name, shape in shapes:
        n = int(np.prod(shape))
        tensors[name] = (
            np.frombuffer(buf, dtype="<f8", count=n, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset += 8 * n
    return assemble(cfg, tensors)


def save_checkpoint(model: SplitModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model))
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> SplitModel:
    return decode_checkpoint(Path(path).read_bytes())

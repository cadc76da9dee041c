"""Unbiased stochastic q-bit quantizer for refined activations.

Magnitudes are mapped onto the uniform grid
``chi_phi = a_min + phi * step``, ``step = (a_max - a_min) / (2**q - 1)``,
with one range per message. An entry between two levels rounds up with
probability equal to its fractional position, so ``E[dequantize(quantize(x))]
== x``. Signs travel separately.
"""

import math

import numpy as np
from pydantic import BaseModel

from app.exceptions import CodeOverflowError, CompressionError, NumericError
from app.numeric import ops
from app.numeric.rng import Rng
from app.schema import ALLOWED_BITS


# positions this close to a level are treated as on it
_SNAP = 1e-9


class QuantizedActivations(BaseModel):
    codes: np.ndarray  # uint64 level indices, shape of the source tensor
    signs: np.ndarray  # bool, True where the entry is negative
    a_min: float  # float32-representable
    a_max: float  # float32-representable
    q: int

    class Config:
        arbitrary_types_allowed = True

    @property
    def shape(self):
        return self.codes.shape

    @property
    def step(self) -> float:
        return level_step(self.a_min, self.a_max, self.q)


def level_step(a_min: float, a_max: float, q: int) -> float:
    return (a_max - a_min) / float(2**q - 1)


def _f32_down(v: float) -> float:
    f = np.float32(v)
    if float(f) > v:
        f = np.nextafter(f, np.float32(-np.inf))
    return float(f)


def _f32_up(v: float) -> float:
    f = np.float32(v)
    if float(f) < v:
        f = np.nextafter(f, np.float32(np.inf))
    return float(f)


def quantize(tokens: np.ndarray, q: int, rng: Rng) -> QuantizedActivations:
    if not 1 <= q <= max(ALLOWED_BITS):
        raise CompressionError(f"bit-width q={q} must lie in [1, {max(ALLOWED_BITS)}]")
    x = ops.as_tensor(tokens)
    if not np.all(np.isfinite(x)):
        raise NumericError("quantize: input contains non-finite values")

    mag = np.abs(x)
    signs = np.signbit(x) & (x != 0)
    if mag.size == 0:
        return QuantizedActivations(
            codes=np.zeros(x.shape, dtype=np.uint64), signs=signs, a_min=0.0, a_max=0.0, q=q
        )

    a_min = _f32_down(float(mag.min()))
    a_max = _f32_up(float(mag.max()))
    if a_max == a_min:
        return QuantizedActivations(
            codes=np.zeros(x.shape, dtype=np.uint64), signs=signs, a_min=a_min, a_max=a_max, q=q
        )

    top = 2**q - 1
    pos = np.clip((mag - a_min) / level_step(a_min, a_max, q), 0.0, float(top))
    nearest = np.rint(pos)
    pos = np.where(np.abs(pos - nearest) < _SNAP, nearest, pos)
    floor = np.floor(pos)
    frac = pos - floor
    u = rng.uniform(x.shape)
    codes = floor.astype(np.uint64) + (u < frac).astype(np.uint64)
    return QuantizedActivations(codes=codes, signs=signs, a_min=a_min, a_max=a_max, q=q)


def dequantize(qa: QuantizedActivations) -> np.ndarray:
    """``sign * (a_min + code * step)``, the exact grid value each code names."""
    codes = np.asarray(qa.codes, dtype=np.uint64)
    if codes.size and int(codes.max()) >= 2**qa.q:
        raise CodeOverflowError(f"code {int(codes.max())} does not fit in {qa.q} bits")
    mag = qa.a_min + codes.astype(np.float64) * qa.step
    return np.where(qa.signs, -mag, mag)


def delta(q: int, d: int) -> float:
    """Relative variance bound ``(1 + sqrt(2d - 1)) / (2 (2^q - 1))`` of the quantizer."""
    if q < 1 or d < 1:
        raise ValueError(f"delta needs q >= 1 and d >= 1, got q={q}, d={d}")
    return (1.0 + math.sqrt(2.0 * d - 1.0)) / (2.0 * (2.0**q - 1.0))

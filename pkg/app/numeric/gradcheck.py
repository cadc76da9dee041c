"""Central finite-difference gradients for checking hand-written backward passes."""

from typing import Callable

import numpy as np

from app.numeric.ops import Tensor


def numerical_gradient(func: Callable[[], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Gradient of ``func()`` w.r.t. the array ``x``, which ``func`` reads.

    ``x`` is perturbed in place one entry at a time and restored afterwards.
    """
    if not x.flags.c_contiguous:
        raise ValueError("numerical_gradient needs a C-contiguous array to perturb")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for j in range(flat.size):
        x0 = flat[j]
        flat[j] = x0 + h
        f_plus = func()
        flat[j] = x0 - h
        f_minus = func()
        flat[j] = x0
        out[j] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-6) -> float:
    """Largest per-entry ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps entries whose true gradient is ~0 from dividing round-off
    by round-off.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))

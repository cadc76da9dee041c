"""Dense float64 kernels with hand-derived backward passes.

Every forward op is a pure function of its inputs. Every ``*_backward`` takes
the upstream gradient plus the forward inputs it needs and returns the exact
vector-Jacobian product. Contractions go through ``numpy.einsum`` with
``optimize=False`` so no BLAS call can reorder a reduction: equal inputs give
bit-identical outputs run after run.
"""

import math
from typing import Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from app.exceptions import DimensionError, LabelError, NumericError


Tensor = NDArray[np.float64]

# tanh approximation of GELU:
#   gelu(x) = 0.5 * x * (1 + tanh(GELU_C * (x + GELU_A * x**3)))
GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_A = 0.044715


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


def check_finite(x: Tensor, op: str) -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: produced non-finite values")
    return x


def check_grad_shape(grad: Tensor, shape: Sequence[int], op: str) -> Tensor:
    grad = as_tensor(grad)
    if grad.shape != tuple(shape):
        raise DimensionError(
            f"{op}: upstream gradient shape {grad.shape} != output shape {tuple(shape)}"
        )
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading dims of ``a`` are treated as rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = np.einsum("...k,kn->...n", a, b, optimize=False)
    return check_finite(out, "matmul")


def matmul_backward(dout: Tensor, a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    dout = check_grad_shape(dout, a.shape[:-1] + (b.shape[1],), "matmul_backward")
    da = np.einsum("...n,kn->...k", dout, b, optimize=False)
    db = np.einsum(
        "mk,mn->kn",
        a.reshape(-1, a.shape[-1]),
        dout.reshape(-1, b.shape[1]),
        optimize=False,
    )
    return da, db


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a[..., m, k] @ b[..., k, n]`` with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: shapes {a.shape} and {b.shape} do not align")
    out = np.einsum("...mk,...kn->...mn", a, b, optimize=False)
    return check_finite(out, "bmm")


def bmm_backward(dout: Tensor, a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    dout = check_grad_shape(dout, a.shape[:-1] + b.shape[-1:], "bmm_backward")
    da = np.einsum("...mn,...kn->...mk", dout, b, optimize=False)
    db = np.einsum("...mk,...mn->...kn", a, dout, optimize=False)
    return da, db


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError(f"softmax_rows: empty last axis in shape {x.shape}")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)
    return check_finite(out, "softmax_rows")


def softmax_backward(dout: Tensor, y: Tensor) -> Tensor:
    """VJP of softmax given its output ``y``."""
    y = as_tensor(y)
    dout = check_grad_shape(dout, y.shape, "softmax_backward")
    return y * (dout - (dout * y).sum(axis=-1, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    x = as_tensor(x)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mean) / np.sqrt(var + eps)
    return check_finite(gamma * xhat + beta, "layer_norm")


def layer_norm_backward(
    dout: Tensor, x: Tensor, gamma: Tensor, eps: float
) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns ``(dx, dgamma, dbeta)``."""
    x = as_tensor(x)
    dout = check_grad_shape(dout, x.shape, "layer_norm_backward")
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std

    dxhat = dout * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    lead = tuple(range(x.ndim - 1))
    dgamma = (dout * xhat).sum(axis=lead)
    dbeta = dout.sum(axis=lead)
    return dx, dgamma, dbeta


def gelu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    return check_finite(0.5 * x * (1.0 + t), "gelu")


def gelu_backward(dout: Tensor, x: Tensor) -> Tensor:
    x = as_tensor(x)
    dout = check_grad_shape(dout, x.shape, "gelu_backward")
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    dt = (1.0 - t**2) * GELU_C * (1.0 + 3.0 * GELU_A * x**2)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * dt)


def cross_entropy(logits: Tensor, labels) -> Tuple[float, Tensor]:
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / B``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} and labels {labels.shape} disagree"
        )
    n, c = logits.shape
    if n and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"cross_entropy: labels must lie in [0, {c})")

    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(n)
    loss = float((log_z - shifted[rows, labels]).mean()) if n else 0.0

    dlogits = softmax_rows(logits) if n else np.zeros_like(logits)
    dlogits[rows, labels] -= 1.0
    dlogits /= max(n, 1)
    if not math.isfinite(loss):
        raise NumericError("cross_entropy: non-finite loss")
    return loss, dlogits

from app.numeric.ops import (
    Tensor,
    as_tensor,
    bmm,
    bmm_backward,
    cross_entropy,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    matmul,
    matmul_backward,
    softmax_backward,
    softmax_rows,
)
from app.numeric.rng import Rng, Stream


__all__ = [
    "Tensor",
    "as_tensor",
    "bmm",
    "bmm_backward",
    "cross_entropy",
    "gelu",
    "gelu_backward",
    "layer_norm",
    "layer_norm_backward",
    "matmul",
    "matmul_backward",
    "softmax_backward",
    "softmax_rows",
    "Rng",
    "Stream",
]

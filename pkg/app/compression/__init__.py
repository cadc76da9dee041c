from app.compression.quantizer import QuantizedActivations, delta, dequantize, quantize
from app.compression.selection import (
    RefinedActivations,
    cls_scores,
    distortion,
    grad_scatter,
    pad_server_grad,
    reconstruct,
    refine,
    top_k_select,
)


__all__ = [
    "QuantizedActivations",
    "RefinedActivations",
    "cls_scores",
    "top_k_select",
    "refine",
    "reconstruct",
    "grad_scatter",
    "pad_server_grad",
    "distortion",
    "quantize",
    "dequantize",
    "delta",
]

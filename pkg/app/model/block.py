"""One pre-norm transformer block with a single-site LoRA pair.

Forward::

    h1 = LN1(x)
    q, k, v = h1 @ W_q, h1 @ W_k, h1 @ W_v
    att = softmax(q @ k^T / sqrt(D))
    x2 = x + (att @ v) @ W_o
    out = x2 + gelu(LN2(x2) @ W_1) @ W_2

The adapted projection computes ``inp @ W + scale * (inp @ U) @ V`` so the
low-rank delta is never materialised.
"""

import math
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel

from app.config import ModelConfig
from app.exceptions import DimensionError
from app.model.params import SITE_WEIGHT, BlockParams, LoraAdapter
from app.numeric import ops
from app.schema import LoraSite


class BlockCache(BaseModel):
    """Forward intermediates a block needs to run backward."""

    x: np.ndarray
    h1: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    att: np.ndarray
    o: np.ndarray
    x2: np.ndarray
    u: np.ndarray
    params: BlockParams
    adapter: Optional[LoraAdapter] = None

    class Config:
        arbitrary_types_allowed = True


def _project(
    inp: np.ndarray, w: np.ndarray, adapter: Optional[LoraAdapter], scale: float
) -> np.ndarray:
    out = ops.matmul(inp, w)
    if adapter is not None:
        out = out + scale * ops.matmul(ops.matmul(inp, adapter.U), adapter.V)
    return out


def _project_backward(
    dout: np.ndarray,
    inp: np.ndarray,
    w: np.ndarray,
    adapter: Optional[LoraAdapter],
    scale: float,
) -> Tuple[np.ndarray, Optional[LoraAdapter]]:
    """Input gradient of :func:`_project`, plus ``(dU, dV)`` when adapted."""
    dinp = np.einsum("...n,kn->...k", dout, w, optimize=False)
    if adapter is None:
        return dinp, None
    z = ops.matmul(inp, adapter.U)
    dz, dv = ops.matmul_backward(scale * dout, z, adapter.V)
    dinp_u, du = ops.matmul_backward(dz, inp, adapter.U)
    return dinp + dinp_u, LoraAdapter(U=du, V=dv)


def cls_patch_logits(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Raw ``q_0 . k_i`` for every patch token ``i = 1..L-1``; shape ``[B, L-1]``."""
    return np.einsum("bd,bjd->bj", q[:, 0, :], k[:, 1:, :], optimize=False)


def block_forward(
    x: np.ndarray,
    params: BlockParams,
    adapter: Optional[LoraAdapter],
    cfg: ModelConfig,
) -> Tuple[np.ndarray, BlockCache]:
    if x.ndim != 3 or x.shape[-1] != cfg.D:
        raise DimensionError(
            f"block input must be [B, L, {cfg.D}], got {tuple(x.shape)}"
        )
    site = cfg.lora_site
    scale = cfg.lora_scale
    inv_sqrt_d = 1.0 / math.sqrt(cfg.D)

    def adapter_at(s: LoraSite) -> Optional[LoraAdapter]:
        return adapter if site == s else None

    h1 = ops.layer_norm(x, params.ln1_gamma, params.ln1_beta, cfg.ln_eps)
    q = _project(h1, params.w_q, adapter_at(LoraSite.QUERY), scale)
    k = _project(h1, params.w_k, adapter_at(LoraSite.KEY), scale)
    v = _project(h1, params.w_v, adapter_at(LoraSite.VALUE), scale)
    att = ops.softmax_rows(ops.bmm(q, np.swapaxes(k, -1, -2)) * inv_sqrt_d)
    o = ops.bmm(att, v)
    x2 = x + _project(o, params.w_o, adapter_at(LoraSite.OUTPUT), scale)
    h2 = ops.layer_norm(x2, params.ln2_gamma, params.ln2_beta, cfg.ln_eps)
    u = ops.matmul(h2, params.w_1)
    a = ops.gelu(u)
    out = x2 + ops.matmul(a, params.w_2)

    cache = BlockCache(
        x=x, h1=h1, q=q, k=k, v=v, att=att, o=o, x2=x2, u=u,
        params=params,
        adapter=adapter,
    )
    return out, cache


def block_backward(
    dout: np.ndarray, cache: BlockCache, cfg: ModelConfig
) -> Tuple[np.ndarray, Optional[LoraAdapter]]:
    """Returns ``(dx, adapter_grad)``; frozen weights get no gradient."""
    dout = ops.check_grad_shape(dout, cache.x.shape, "block_backward")
    p = cache.params
    site = cfg.lora_site
    scale = cfg.lora_scale
    inv_sqrt_d = 1.0 / math.sqrt(cfg.D)
    grads = {}

    def back(d: np.ndarray, inp: np.ndarray, s: LoraSite) -> np.ndarray:
        adapter = cache.adapter if site == s else None
        dinp, g = _project_backward(d, inp, getattr(p, SITE_WEIGHT[s]), adapter, scale)
        if g is not None:
            grads["adapter"] = g
        return dinp

    # MLP branch
    da = np.einsum("...n,kn->...k", dout, p.w_2, optimize=False)
    du = ops.gelu_backward(da, cache.u)
    dh2 = np.einsum("...n,kn->...k", du, p.w_1, optimize=False)
    dx2 = dout + ops.layer_norm_backward(dh2, cache.x2, p.ln2_gamma, cfg.ln_eps)[0]

    # attention branch
    do = back(dx2, cache.o, LoraSite.OUTPUT)
    datt, dv = ops.bmm_backward(do, cache.att, cache.v)
    dscores = ops.softmax_backward(datt, cache.att) * inv_sqrt_d
    dq, dk_t = ops.bmm_backward(dscores, cache.q, np.swapaxes(cache.k, -1, -2))
    dk = np.swapaxes(dk_t, -1, -2)
    dh1 = (
        back(dq, cache.h1, LoraSite.QUERY)
        + back(dk, cache.h1, LoraSite.KEY)
        + back(dv, cache.h1, LoraSite.VALUE)
    )
    dx = dx2 + ops.layer_norm_backward(dh1, cache.x, p.ln1_gamma, cfg.ln_eps)[0]
    return dx, grads.get("adapter")

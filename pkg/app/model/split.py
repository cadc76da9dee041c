from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from app.config import ModelConfig, parse_section
from app.exceptions import DimensionError, StaleCacheError
from app.model.block import BlockCache, block_backward, block_forward, cls_patch_logits
from app.model.params import BlockParams, Embedder, LoraAdapter, SplitModel
from app.numeric import ops
from app.numeric.rng import Rng


ADAPTER_INIT_STD = 0.02


class DeviceCache(BaseModel):
    block_caches: List[BlockCache]
    adapters: Tuple[Optional[LoraAdapter], ...]

    class Config:
        arbitrary_types_allowed = True


class DeviceForwardOutput(BaseModel):
    activations: np.ndarray  # B x (M+1) x D, token 0 is CLS
    cls_patch_logits: np.ndarray  # B x M
    cache: DeviceCache

    class Config:
        arbitrary_types_allowed = True


class ServerCache(BaseModel):
    block_caches: List[BlockCache]
    cls_hidden: np.ndarray  # B x D, input of the final norm
    features: np.ndarray  # B x D, input of the head
    seq_len: int
    adapters: Tuple[Optional[LoraAdapter], ...]
    head: np.ndarray

    class Config:
        arbitrary_types_allowed = True


class ServerForwardOutput(BaseModel):
    logits: np.ndarray  # B x C
    cache: ServerCache

    class Config:
        arbitrary_types_allowed = True


def init_model(cfg: Union[ModelConfig, dict], rng: Rng) -> SplitModel:
    """Draw a fresh backbone and zero-delta adapters from ``rng``.

    Draw order is fixed (embedder, blocks, adapters, head), so one seed
    always yields the same parameters.
    """
    if not isinstance(cfg, ModelConfig):
        cfg = parse_section("model", dict(cfg))
    d, std = cfg.D, cfg.init_std

    embedder = Embedder(
        w_patch=rng.normal(std, (cfg.patch_dim, d)),
        pos=rng.normal(std, (cfg.M + 1, d)),
        cls=rng.normal(std, (d,)),
    )
    blocks = tuple(
        BlockParams(
            w_q=rng.normal(std, (d, d)),
            w_k=rng.normal(std, (d, d)),
            w_v=rng.normal(std, (d, d)),
            w_o=rng.normal(std, (d, d)),
            w_1=rng.normal(std, (d, 4 * d)),
            w_2=rng.normal(std, (4 * d, d)),
            ln1_gamma=np.ones(d),
            ln1_beta=np.zeros(d),
            ln2_gamma=np.ones(d),
            ln2_beta=np.zeros(d),
        )
        for _ in range(cfg.E)
    )
    adapters = tuple(
        LoraAdapter(U=rng.normal(ADAPTER_INIT_STD, (d, cfg.r)), V=np.zeros((cfg.r, d)))
        for _ in range(cfg.E)
    )
    return SplitModel(
        config=cfg,
        embedder=embedder,
        blocks=blocks,
        adapters=adapters,
        norm_gamma=np.ones(d),
        norm_beta=np.zeros(d),
        head=rng.normal(std, (d, cfg.C)),
    )


def _patches(model: SplitModel, batch: np.ndarray) -> np.ndarray:
    cfg = model.config
    batch = ops.as_tensor(batch)
    if batch.ndim == 2 and batch.shape[1] == cfg.M * cfg.patch_dim:
        return batch.reshape(batch.shape[0], cfg.M, cfg.patch_dim)
    if batch.ndim == 3 and batch.shape[1:] == (cfg.M, cfg.patch_dim):
        return batch
    raise DimensionError(
        f"batch must be [B, {cfg.M * cfg.patch_dim}] or [B, {cfg.M}, {cfg.patch_dim}], "
        f"got {tuple(batch.shape)}"
    )


def embed(model: SplitModel, batch: np.ndarray) -> np.ndarray:
    """Patch projection, CLS prepend and positional embedding: ``[B, M+1, D]``."""
    patches = _patches(model, batch)
    emb = model.embedder
    tokens = ops.matmul(patches, emb.w_patch)
    cls = np.broadcast_to(emb.cls, (tokens.shape[0], 1, emb.cls.shape[0]))
    return np.concatenate([cls, tokens], axis=1) + emb.pos


def device_forward(model: SplitModel, batch: np.ndarray) -> DeviceForwardOutput:
    """Embedding plus blocks ``1..e``; also returns the last block's CLS logits."""
    x = embed(model, batch)
    caches = []
    for params, adapter in zip(model.device_blocks, model.device_adapters):
        x, cache = block_forward(x, params, adapter, model.config)
        caches.append(cache)
    last = caches[-1]
    return DeviceForwardOutput(
        activations=x,
        cls_patch_logits=cls_patch_logits(last.q, last.k),
        cache=DeviceCache(block_caches=caches, adapters=model.device_adapters),
    )


def server_forward(model: SplitModel, acts: np.ndarray) -> ServerForwardOutput:
    """Blocks ``e+1..E``, final norm and head on token 0; any length ``L >= 1``."""
    cfg = model.config
    x = ops.as_tensor(acts)
    seq_len = x.shape[1] if x.ndim == 3 else 0
    if x.ndim != 3 or x.shape[1] < 1 or x.shape[2] != cfg.D:
        raise DimensionError(
            f"server activations must be [B, L>=1, {cfg.D}], got {tuple(x.shape)}"
        )
    caches = []
    for params, adapter in zip(model.server_blocks, model.server_adapters):
        x, cache = block_forward(x, params, adapter, cfg)
        caches.append(cache)
    cls_hidden = x[:, 0, :]
    features = ops.layer_norm(cls_hidden, model.norm_gamma, model.norm_beta, cfg.ln_eps)
    logits = ops.matmul(features, model.head)
    return ServerForwardOutput(
        logits=logits,
        cache=ServerCache(
            block_caches=caches,
            cls_hidden=cls_hidden,
            features=features,
            seq_len=seq_len,
            adapters=model.server_adapters,
            head=model.head,
        ),
    )


def _check_fresh(
    cached: Sequence[Optional[LoraAdapter]], current: Sequence[Optional[LoraAdapter]], side: str
) -> None:
    if len(cached) != len(current) or any(a is not b for a, b in zip(cached, current)):
        raise StaleCacheError(f"{side} cache was produced by different adapter values")


def server_backward(
    model: SplitModel, cached: ServerCache, dlogits: np.ndarray
) -> Tuple[Tuple[Optional[LoraAdapter], ...], np.ndarray, np.ndarray]:
    """Returns ``(server_adapter_grads, head_grad, dacts)``."""
    _check_fresh(cached.adapters, model.server_adapters, "server")
    if cached.head is not model.head:
        raise StaleCacheError("server cache was produced by a different head")
    cfg = model.config

    dfeatures, dhead = ops.matmul_backward(dlogits, cached.features, model.head)
    dcls = ops.layer_norm_backward(dfeatures, cached.cls_hidden, model.norm_gamma, cfg.ln_eps)[0]
    dx = np.zeros((dcls.shape[0], cached.seq_len, cfg.D))
    dx[:, 0, :] = dcls

    grads: List[Optional[LoraAdapter]] = []
    for cache in reversed(cached.block_caches):
        dx, g = block_backward(dx, cache, cfg)
        grads.append(g)
    return tuple(reversed(grads)), dhead, dx


def device_backward(
    model: SplitModel, cached: DeviceCache, dacts_full: np.ndarray
) -> Tuple[Optional[LoraAdapter], ...]:
    """Adapter gradients for blocks ``1..e``; the embedder is frozen so the chain stops there."""
    _check_fresh(cached.adapters, model.device_adapters, "device")
    expected = cached.block_caches[-1].x.shape
    dx = ops.as_tensor(dacts_full)
    if dx.shape != expected:
        raise DimensionError(
            f"device gradient shape {tuple(dx.shape)} != activation shape {tuple(expected)}"
        )
    grads: List[Optional[LoraAdapter]] = []
    for cache in reversed(cached.block_caches):
        dx, g = block_backward(dx, cache, model.config)
        grads.append(g)
    return tuple(reversed(grads))


def sgd_update(param: np.ndarray, grad: np.ndarray, eta: float) -> np.ndarray:
    if eta < 0:
        raise ValueError(f"learning rate must be non-negative, got {eta}")
    if param.shape != grad.shape:
        raise DimensionError(f"sgd: parameter {param.shape} vs gradient {grad.shape}")
    return param - eta * grad


def sgd_step(
    adapters: Sequence[LoraAdapter], grads: Sequence[LoraAdapter], eta: float
) -> Tuple[LoraAdapter, ...]:
    """One plain SGD step ``w - eta * g`` per adapter; inputs are left untouched."""
    if len(adapters) != len(grads):
        raise DimensionError(f"sgd: {len(adapters)} adapters vs {len(grads)} gradients")
    return tuple(
        LoraAdapter(U=sgd_update(a.U, g.U, eta), V=sgd_update(a.V, g.V, eta))
        for a, g in zip(adapters, grads)
    )

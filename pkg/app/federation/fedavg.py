from typing import List, Sequence, Tuple

import numpy as np

from app.exceptions import DimensionError
from app.model.params import LoraAdapter


WEIGHT_TOLERANCE = 1e-12


def data_weights(shard_sizes: Sequence[int]) -> List[float]:
    """``rho_n = |D_n| / sum_m |D_m|``."""
    total = float(sum(shard_sizes))
    if total <= 0:
        raise ValueError("data weights need at least one sample")
    return [size / total for size in shard_sizes]


def fedavg(
    adapters: Sequence[Sequence[LoraAdapter]], weights: Sequence[float]
) -> Tuple[LoraAdapter, ...]:
    """Weighted elementwise mean of per-client adapter stacks, U and V separately.

    ``adapters[n][l]`` is client ``n``'s adapter for block ``l``.
    """
    if not adapters or len(adapters) != len(weights):
        raise ValueError(f"{len(adapters)} adapter sets vs {len(weights)} weights")
    if abs(sum(weights) - 1.0) > WEIGHT_TOLERANCE:
        raise ValueError(f"FedAvg weights must sum to 1, got {sum(weights)!r}")
    n_blocks = len(adapters[0])
    for stack in adapters:
        if len(stack) != n_blocks:
            raise DimensionError("clients hold different numbers of adapter blocks")
        for mine, ref in zip(stack, adapters[0]):
            if mine.U.shape != ref.U.shape or mine.V.shape != ref.V.shape:
                raise DimensionError(
                    f"adapter shapes {mine.U.shape}/{mine.V.shape} vs {ref.U.shape}/{ref.V.shape}"
                )

    w = np.asarray(weights, dtype=np.float64)
    out = []
    for block in range(n_blocks):
        us = np.stack([stack[block].U for stack in adapters])
        vs = np.stack([stack[block].V for stack in adapters])
        out.append(
            LoraAdapter(
                U=np.einsum("n,nij->ij", w, us, optimize=False),
                V=np.einsum("n,nij->ij", w, vs, optimize=False),
            )
        )
    return tuple(out)

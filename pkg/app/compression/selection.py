"""CLS-attention token selection, weighted merging and the matching scatter.

A refined sequence is ``[CLS, selected tokens (ascending index), merged]``.
The merged token is the attention-weighted mean of every discarded patch
token; when nothing is discarded (``K == M``) the slot holds zeros and
``merged_present`` is false.

Patch indices are 1-based positions in the full activation tensor (0 is CLS).
"""

import numpy as np
from pydantic import BaseModel

from app.exceptions import CompressionError, DimensionError
from app.numeric import ops


class RefinedActivations(BaseModel):
    tokens: np.ndarray  # B x (K+2) x D
    indices: np.ndarray  # B x K, int64, 1-based, ascending
    merge_weights: np.ndarray  # B x M, zero at selected positions
    merged_present: bool

    class Config:
        arbitrary_types_allowed = True

    @property
    def K(self) -> int:
        return self.indices.shape[1]

    @property
    def M(self) -> int:
        return self.merge_weights.shape[1]

    def server_tokens(self) -> np.ndarray:
        """Tokens the server consumes: the empty merged slot is dropped."""
        return self.tokens if self.merged_present else self.tokens[:, : self.K + 1, :]


def cls_scores(cls_patch_logits: np.ndarray) -> np.ndarray:
    """``alpha_i = softmax_i(q_0 . k_i)`` over patch tokens only."""
    return ops.softmax_rows(cls_patch_logits)


def top_k_select(alpha: np.ndarray, K: int) -> np.ndarray:
    """Indices of the ``K`` largest scores per row, ties to the smaller index."""
    alpha = ops.as_tensor(alpha)
    if alpha.ndim != 2:
        raise DimensionError(f"scores must be [B, M], got {tuple(alpha.shape)}")
    m = alpha.shape[1]
    if not 1 <= K <= m:
        raise CompressionError(f"token budget K={K} must lie in [1, {m}]")
    positions = np.arange(m)
    out = np.empty((alpha.shape[0], K), dtype=np.int64)
    for b, row in enumerate(alpha):
        # lexsort keys: last is primary
        order = np.lexsort((positions, -row))
        out[b] = np.sort(order[:K]) + 1
    return out


def refine(acts: np.ndarray, alpha: np.ndarray, K: int) -> RefinedActivations:
    acts = ops.as_tensor(acts)
    if acts.ndim != 3:
        raise DimensionError(f"activations must be [B, M+1, D], got {tuple(acts.shape)}")
    b, length, d = acts.shape
    m = length - 1
    if alpha.shape != (b, m):
        raise DimensionError(
            f"scores shape {tuple(alpha.shape)} does not match activations {tuple(acts.shape)}"
        )
    indices = top_k_select(alpha, K)
    rows = np.arange(b)[:, None]

    discarded = np.ones((b, m), dtype=bool)
    discarded[rows, indices - 1] = False
    weights = np.where(discarded, alpha, 0.0)
    totals = weights.sum(axis=1, keepdims=True)
    # all discarded scores underflowed: fall back to a plain mean
    underflow = (totals[:, 0] <= 0.0) & discarded.any(axis=1)
    if underflow.any():
        weights[underflow] = discarded[underflow].astype(np.float64)
        totals = weights.sum(axis=1, keepdims=True)
    weights = np.divide(weights, totals, out=np.zeros_like(weights), where=totals > 0)

    merged = np.einsum("bm,bmd->bd", weights, acts[:, 1:, :], optimize=False)
    tokens = np.concatenate(
        [acts[:, :1, :], acts[rows, indices, :], merged[:, None, :]], axis=1
    )
    return RefinedActivations(
        tokens=tokens,
        indices=indices,
        merge_weights=weights,
        merged_present=K < m,
    )


def _check_indices(ref: RefinedActivations, M: int) -> None:
    idx = ref.indices
    if idx.size and (idx.min() < 1 or idx.max() > M):
        raise CompressionError(f"token index outside [1, {M}]")
    if idx.shape[1] > 1 and np.any(np.diff(idx, axis=1) <= 0):
        raise CompressionError("token indices must be strictly increasing per sample")


def reconstruct(ref: RefinedActivations, M: int) -> np.ndarray:
    """Scatter back to ``[B, M+1, D]``, copying the merged token into every discarded slot."""
    _check_indices(ref, M)
    b, _, d = ref.tokens.shape
    k = ref.K
    rows = np.arange(b)[:, None]
    out = np.repeat(ref.tokens[:, k + 1 : k + 2, :], M + 1, axis=1)
    out[:, 0, :] = ref.tokens[:, 0, :]
    out[rows, ref.indices, :] = ref.tokens[:, 1 : k + 1, :]
    return out


def grad_scatter(dtokens: np.ndarray, ref: RefinedActivations, M: int) -> np.ndarray:
    """Adjoint of :func:`refine` with the merge weights held fixed.

    Quantization is passed straight through, so ``dtokens`` is the gradient
    w.r.t. the dequantized sequence. A zero gradient is returned for the
    merged slot when it carried nothing.
    """
    _check_indices(ref, M)
    dtokens = ops.check_grad_shape(dtokens, ref.tokens.shape, "grad_scatter")
    b, _, d = dtokens.shape
    k = ref.K
    rows = np.arange(b)[:, None]
    out = np.zeros((b, M + 1, d))
    out[:, 0, :] = dtokens[:, 0, :]
    if ref.merged_present:
        out[:, 1:, :] = ref.merge_weights[:, :, None] * dtokens[:, k + 1 : k + 2, :]
    out[rows, ref.indices, :] = dtokens[:, 1 : k + 1, :]
    return out


def pad_server_grad(dtokens: np.ndarray, ref: RefinedActivations) -> np.ndarray:
    """Inverse of :meth:`RefinedActivations.server_tokens` for gradients."""
    if ref.merged_present:
        return dtokens
    pad = np.zeros((dtokens.shape[0], 1, dtokens.shape[2]))
    return np.concatenate([dtokens, pad], axis=1)


def distortion(acts: np.ndarray, ref: RefinedActivations) -> float:
    """Squared Frobenius error of the merge-and-scatter reconstruction."""
    m = acts.shape[1] - 1
    return float(np.sum((acts - reconstruct(ref, m)) ** 2))

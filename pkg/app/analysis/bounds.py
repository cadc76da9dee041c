"""Convergence-residual calculator.

The compression penalty of a (K, q) choice is::

    R(q, K) = (8 V S I / T) * sum_t eta_t^2
              * sum_n (rho_n^2 + 1) / upsilon_n
                * [ 2 sigma_n^2
                    + 2 gamma^2 (1 + kappa) Lambda delta(q, d)
                    + 8 gamma^2 (1 + 1/kappa) Psi B (M - K) ]

where ``Psi`` is the largest squared token norm of the cut-layer activations
and ``Lambda`` the mean squared Frobenius norm of the refined sequence.
"""

from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from app.compression.quantizer import delta
from app.compression.selection import cls_scores, refine
from app.config import BoundSettings, TrainConfig
from app.exceptions import BoundError
from app.logger import logger
from app.model.params import SplitModel
from app.model.split import device_forward


class BoundConstants(BaseModel):
    """Problem constants; per-client lists have one entry per client ``n``."""

    sigma2: List[float]
    gamma: float
    kappa: float
    S: float
    epsilon2: float = 1.0
    Psi: float = Field(..., ge=0.0)
    Lambda: float = Field(..., ge=0.0)
    participation: List[float]
    weights: List[float]
    V: int = Field(..., ge=1)
    I: int = Field(..., ge=1)  # noqa: E741
    T: int = Field(..., ge=1)
    eta: Union[float, List[float]] = Field(..., description="Scalar or one value per round")

    @model_validator(mode="after")
    def check_lengths(self) -> "BoundConstants":
        n = len(self.weights)
        if len(self.sigma2) != n or len(self.participation) != n:
            raise ValueError("sigma2, participation and weights need one entry per client")
        if any(p <= 0 for p in self.participation):
            raise ValueError("participation probabilities must be positive")
        if isinstance(self.eta, list) and len(self.eta) != self.T:
            raise ValueError(f"eta schedule has {len(self.eta)} entries, T={self.T}")
        return self

    def eta_square_sum(self) -> float:
        if isinstance(self.eta, list):
            return float(sum(e * e for e in self.eta))
        return self.T * self.eta * self.eta

    @classmethod
    def from_settings(
        cls,
        settings: BoundSettings,
        train: TrainConfig,
        Psi: float,
        Lambda: float,
    ) -> "BoundConstants":
        """Fill defaults: uniform weights, full participation, one sigma for all."""
        v = train.clients
        sigma2 = settings.sigma2 if isinstance(settings.sigma2, list) else [settings.sigma2] * v
        try:
            return cls(
                sigma2=sigma2,
                gamma=settings.gamma,
                kappa=settings.kappa,
                S=settings.S,
                epsilon2=settings.epsilon2,
                Psi=settings.Psi if settings.Psi is not None else Psi,
                Lambda=settings.Lambda if settings.Lambda is not None else Lambda,
                participation=settings.participation or [1.0] * v,
                weights=settings.weights or [1.0 / v] * v,
                V=v,
                I=train.I,
                T=train.T,
                eta=train.eta,
            )
        except ValidationError as e:
            raise BoundError(f"invalid bound constants: {e.errors()[0].get('msg')}") from e


def r_term(q: int, K: int, consts: BoundConstants, M: int, B: int, d: int) -> float:
    if consts.kappa <= 0:
        raise BoundError(f"kappa must be positive, got {consts.kappa}")
    if not 0 <= K <= M:
        raise BoundError(f"K={K} outside [0, M={M}]")
    max_eta = max(consts.eta) if isinstance(consts.eta, list) else consts.eta
    if consts.S > 0 and max_eta > 1.0 / (4.0 * consts.S):
        logger.warning(f"eta={max_eta} exceeds 1/(4S)={1.0 / (4.0 * consts.S):.4g}")

    g2 = consts.gamma**2
    quant = 2.0 * g2 * (1.0 + consts.kappa) * consts.Lambda * delta(q, d)
    select = 8.0 * g2 * (1.0 + 1.0 / consts.kappa) * consts.Psi * B * (M - K)
    total = 0.0
    for rho, ups, sigma2 in zip(consts.weights, consts.participation, consts.sigma2):
        total += (rho * rho + 1.0) / ups * (2.0 * sigma2 + quant + select)
    scale = 8.0 * consts.V * consts.S * consts.I / consts.T * consts.eta_square_sum()
    return scale * total


def activation_constants(
    activations: Sequence[np.ndarray], refined_tokens: Sequence[np.ndarray]
) -> Tuple[float, float]:
    """``(Psi, Lambda)``: largest squared token norm and mean squared Frobenius norm."""
    if not activations or not refined_tokens:
        raise BoundError("need at least one activation batch")
    psi = 0.0
    for acts in activations:
        if acts.size:
            psi = max(psi, float(np.max(np.sum(acts * acts, axis=-1))))
    lam = float(np.mean([np.sum(t * t) for t in refined_tokens]))
    return psi, lam


def measure_constants(
    model: SplitModel, batches: Iterable[np.ndarray], K: Optional[int] = None
) -> Tuple[float, float]:
    """Run the device side on each batch and measure ``(Psi, Lambda)``."""
    k = K if K is not None else model.config.M
    acts, refined = [], []
    for batch in batches:
        out = device_forward(model, batch)
        acts.append(out.activations)
        refined.append(refine(out.activations, cls_scores(out.cls_patch_logits), k).tokens)
    return activation_constants(acts, refined)

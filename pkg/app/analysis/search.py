import math
from typing import List, Optional, Union

from pydantic import BaseModel, Field, model_validator

from app.analysis.bounds import BoundConstants, r_term
from app.config import ModelConfig, RunConfig
from app.federation.costs import MemoryModel, feasible_cuts
from app.logger import logger
from app.wire.accounting import payload_bits


class SearchSpace(BaseModel):
    e_candidates: List[int]
    k_min: int = 1
    k_max: int
    q_set: List[int]
    c_max_bits: Optional[float] = Field(None, description="None: no payload cap")
    omega_bytes: Optional[float] = Field(None, description="None: no memory cap")

    @model_validator(mode="after")
    def check_ranges(self) -> "SearchSpace":
        if not self.e_candidates or not self.q_set:
            raise ValueError("search space needs at least one cut layer and one bit-width")
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError(f"empty token range [{self.k_min}, {self.k_max}]")
        return self

    @classmethod
    def from_run(cls, run: RunConfig) -> "SearchSpace":
        s = run.search
        return cls(
            e_candidates=s.e_candidates or list(range(1, run.model.E + 1)),
            k_min=s.k_min,
            k_max=s.k_max if s.k_max is not None else run.model.M,
            q_set=s.q_set,
            c_max_bits=s.c_max_bits,
            omega_bytes=s.omega_bytes,
        )


class SearchResult(BaseModel):
    e: int
    K: int
    q: int
    r: float
    payload_bits: int
    evaluated: int = Field(0, description="Feasible cells scored")


class Infeasible(BaseModel):
    binding: List[str] = Field(..., description="Subset of ['memory', 'payload']")
    detail: str


def grid_search_P(
    space: SearchSpace,
    consts: BoundConstants,
    M: int,
    B: int,
    D: int,
    model: Optional[ModelConfig] = None,
) -> Union[SearchResult, Infeasible]:
    """Exhaustive minimum of ``r_term`` over (e, K, q) under the payload and memory caps.

    ``d`` for each cell is the refined message size ``B (K+2) D``. Ties go to
    the smaller payload, then the smaller ``e`` (then smaller K, then q).
    Without a ``model`` the memory constraint is not applied.
    """
    k_max = min(space.k_max, M)
    if model is not None:
        memory = MemoryModel(model=model, B=B)
        cuts = feasible_cuts(memory, space.omega_bytes, space.e_candidates)
    else:
        cuts = sorted(space.e_candidates)

    cap = space.c_max_bits if space.c_max_bits is not None else math.inf
    cells = [
        (K, q)
        for K in range(space.k_min, k_max + 1)
        for q in sorted(space.q_set)
        if payload_bits(B, K, D, q) <= cap
    ]

    binding = []
    if not cuts:
        binding.append("memory")
    if not cells:
        binding.append("payload")
    if binding:
        detail = f"no feasible {' or '.join(binding)} setting"
        logger.warning(f"Search infeasible: {detail}")
        return Infeasible(binding=binding, detail=detail)

    best = None
    best_key = None
    for e in cuts:
        for K, q in cells:
            bits = payload_bits(B, K, D, q)
            r = r_term(q, K, consts, M, B, B * (K + 2) * D)
            key = (r, bits, e, K, q)
            if best_key is None or key < best_key:
                best_key, best = key, (e, K, q, r, bits)
    e, K, q, r, bits = best
    return SearchResult(e=e, K=K, q=q, r=r, payload_bits=bits, evaluated=len(cuts) * len(cells))

from app.analysis.bounds import (
    BoundConstants,
    activation_constants,
    measure_constants,
    r_term,
)
from app.analysis.search import Infeasible, SearchResult, SearchSpace, grid_search_P
from app.compression.quantizer import delta


__all__ = [
    "BoundConstants",
    "activation_constants",
    "measure_constants",
    "r_term",
    "delta",
    "SearchSpace",
    "SearchResult",
    "Infeasible",
    "grid_search_P",
]

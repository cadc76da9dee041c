"""Pre-patchified classification datasets: synthetic prototypes and CSV files.

A sample is a flat vector of ``M * patch_dim`` features (M patches of
``patch_dim`` values each) plus an integer label.
"""

from pathlib import Path
from typing import Tuple, Union

import numpy as np
from pydantic import BaseModel

from app.config import DataSettings, ModelConfig
from app.exceptions import DimensionError, LabelError
from app.logger import logger
from app.numeric.rng import Rng


class Dataset(BaseModel):
    features: np.ndarray  # N x (M * patch_dim)
    labels: np.ndarray  # N, int64

    class Config:
        arbitrary_types_allowed = True

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def validate_dataset(ds: Dataset, cfg: ModelConfig) -> Dataset:
    width = cfg.M * cfg.patch_dim
    if ds.features.ndim != 2 or ds.features.shape[1] != width:
        raise DimensionError(
            f"dataset rows must hold {width} features, got shape {tuple(ds.features.shape)}"
        )
    if ds.labels.shape != (ds.features.shape[0],):
        raise DimensionError("labels and features disagree on the sample count")
    if len(ds) and (ds.labels.min() < 0 or ds.labels.max() >= cfg.C):
        raise LabelError(f"dataset labels must lie in [0, {cfg.C})")
    return ds


def synthetic_task(
    cfg: ModelConfig, settings: DataSettings, rng: Rng
) -> Tuple[Dataset, Dataset]:
    """Gaussian class prototypes shared across patches.

    Class ``c`` has a prototype ``mu_c`` (one per patch feature) and a fixed
    per-patch offset ``nu_{c,i}``; a sample is ``mu_c + nu_{c,i} + noise``
    for every patch ``i``. Train and test sets share the prototypes.
    """
    p, m, c = cfg.patch_dim, cfg.M, cfg.C
    prototypes = rng.normal(1.0, (c, 1, p))
    offsets = rng.normal(settings.token_spread, (c, m, p))
    centers = prototypes + offsets

    def draw(n: int, stream: Rng) -> Dataset:
        labels = stream.integers(0, c, size=n).astype(np.int64)
        noise = stream.normal(settings.noise, (n, m, p))
        return Dataset(features=(centers[labels] + noise).reshape(n, m * p), labels=labels)

    train = draw(settings.n_train, rng.child(0))
    test = draw(settings.n_test, rng.child(1))
    logger.info(
        f"Synthetic task: {len(train)} train / {len(test)} test samples, {c} classes, "
        f"{m} patches of {p} features"
    )
    return train, test


def load_csv(path: Union[str, Path], cfg: ModelConfig) -> Dataset:
    """Rows of ``label,f0,...,f_{M*P-1}``; blank lines and ``#`` comments skipped."""
    rows = np.loadtxt(path, delimiter=",", comments="#", ndmin=2, dtype=np.float64)
    if rows.shape[1] < 1:
        raise DimensionError(f"{path}: no columns")
    labels = rows[:, 0]
    if np.any(labels != np.round(labels)):
        raise LabelError(f"{path}: labels must be integers")
    ds = Dataset(features=rows[:, 1:], labels=labels.astype(np.int64))
    return validate_dataset(ds, cfg)


def save_csv(ds: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.column_stack([ds.labels.astype(np.float64), ds.features])
    fmt = ["%d"] + ["%.17g"] * ds.features.shape[1]
    np.savetxt(path, table, delimiter=",", fmt=fmt)
    return path

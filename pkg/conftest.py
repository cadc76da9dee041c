import copy
import tomllib
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest

from app.config import ModelConfig, RunConfig
from app.model.params import LoraAdapter, SplitModel
from app.model.split import init_model
from app.numeric.rng import Rng


PROJECT_ROOT = Path(__file__).resolve().parent
TOY_CONFIG = PROJECT_ROOT / "config" / "config.example.toml"

SMALL_RUN: Dict[str, Any] = {
    "seed": 3,
    "model": {"E": 2, "D": 8, "M": 4, "r": 2, "C": 3, "e": 1, "patch_dim": 4, "init_std": 0.35},
    "compression": {"K": 2, "q": 8},
    "train": {"T": 2, "I": 2, "eta": 0.05, "B": 4, "clients": 4, "clients_per_round": 2,
              "iid": True},
    "data": {"n_train": 64, "n_test": 24},
}


def make_run(base: Dict[str, Any], **sections: Dict[str, Any]) -> RunConfig:
    """``base`` with each keyword's table merged over the section of that name."""
    raw = copy.deepcopy(base)
    for name, values in sections.items():
        if name == "seed":
            raw["seed"] = values
        else:
            raw.setdefault(name, {}).update(values)
    return RunConfig.from_dict(raw)


def make_small_run(**sections: Dict[str, Any]) -> RunConfig:
    return make_run(SMALL_RUN, **sections)


def toy_config_dict() -> Dict[str, Any]:
    with TOY_CONFIG.open("rb") as f:
        return tomllib.load(f)


def randomize_adapters(model: SplitModel, rng: Rng, std: float = 0.3) -> SplitModel:
    """Give every adapter a nonzero U and V so gradients reach both factors."""
    d, r = model.config.D, model.config.r
    adapters = tuple(
        LoraAdapter(U=rng.normal(std, (d, r)), V=rng.normal(std, (r, d)))
        for _ in model.blocks
    )
    return model.model_copy(update={"adapters": adapters})


@pytest.fixture
def tiny_config() -> ModelConfig:
    """E=2, e=1, D=8, M=4, r=2, C=3 on 4-feature patches."""
    return ModelConfig(E=2, D=8, M=4, H=1, r=2, C=3, e=1, patch_dim=4, init_std=0.5)


@pytest.fixture
def tiny_model(tiny_config) -> SplitModel:
    model = init_model(tiny_config, Rng(11))
    return randomize_adapters(model, Rng(12))


@pytest.fixture
def tiny_batch(tiny_config):
    rng = Rng(13)
    x = rng.normal(1.0, (2, tiny_config.M * tiny_config.patch_dim))
    y = np.array([0, 2])
    return x, y


@pytest.fixture
def small_run() -> RunConfig:
    """A federation small enough to run a few rounds in well under a second each."""
    return make_small_run()


@pytest.fixture
def toy_config_path() -> Path:
    return TOY_CONFIG

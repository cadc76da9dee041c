from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from app.config import ModelConfig
from app.schema import LoraSite


class LoraAdapter(BaseModel):
    """Trainable low-rank pair; the adapted weight is ``W + scale * U @ V``."""

    U: np.ndarray  # D x r
    V: np.ndarray  # r x D

    class Config:
        arbitrary_types_allowed = True
        frozen = True

    @classmethod
    def zeros(cls, d: int, r: int) -> "LoraAdapter":
        return cls(U=np.zeros((d, r)), V=np.zeros((r, d)))

    def delta(self, scale: float) -> np.ndarray:
        return scale * (self.U @ self.V)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.U.reshape(-1), self.V.reshape(-1)])


class Embedder(BaseModel):
    w_patch: np.ndarray  # P x D
    pos: np.ndarray  # (M+1) x D
    cls: np.ndarray  # D

    class Config:
        arbitrary_types_allowed = True
        frozen = True


class BlockParams(BaseModel):
    """Frozen weights of one pre-norm transformer block (no biases)."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_1: np.ndarray  # D x 4D
    w_2: np.ndarray  # 4D x D
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray

    class Config:
        arbitrary_types_allowed = True
        frozen = True


BLOCK_FIELDS = (
    "w_q", "w_k", "w_v", "w_o", "w_1", "w_2",
    "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
)

SITE_WEIGHT = {
    LoraSite.QUERY: "w_q",
    LoraSite.KEY: "w_k",
    LoraSite.VALUE: "w_v",
    LoraSite.OUTPUT: "w_o",
}


class SplitModel(BaseModel):
    """Frozen ViT backbone cut after block ``e`` plus per-block adapters.

    Blocks ``[0, e)`` and their adapters live on the device, blocks ``[e, E)``,
    their adapters, the final norm and the head on the server. Updates never
    mutate a model: ``with_*`` returns a copy sharing the frozen arrays.
    """

    config: ModelConfig
    embedder: Embedder
    blocks: Tuple[BlockParams, ...]
    adapters: Tuple[Optional[LoraAdapter], ...]
    norm_gamma: np.ndarray
    norm_beta: np.ndarray
    head: np.ndarray  # D x C

    class Config:
        arbitrary_types_allowed = True
        frozen = True

    @property
    def cut(self) -> int:
        return self.config.e

    @property
    def device_blocks(self) -> Tuple[BlockParams, ...]:
        return self.blocks[: self.cut]

    @property
    def server_blocks(self) -> Tuple[BlockParams, ...]:
        return self.blocks[self.cut :]

    @property
    def device_adapters(self) -> Tuple[Optional[LoraAdapter], ...]:
        return self.adapters[: self.cut]

    @property
    def server_adapters(self) -> Tuple[Optional[LoraAdapter], ...]:
        return self.adapters[self.cut :]

    def with_device_adapters(self, adapters: Sequence[LoraAdapter]) -> "SplitModel":
        if len(adapters) != self.cut:
            raise ValueError(f"expected {self.cut} device adapters, got {len(adapters)}")
        return self.model_copy(
            update={"adapters": tuple(adapters) + self.server_adapters}
        )

    def with_server_state(
        self, adapters: Sequence[LoraAdapter], head: np.ndarray
    ) -> "SplitModel":
        if len(adapters) != len(self.blocks) - self.cut:
            raise ValueError(
                f"expected {len(self.blocks) - self.cut} server adapters, got {len(adapters)}"
            )
        return self.model_copy(
            update={"adapters": self.device_adapters + tuple(adapters), "head": head}
        )

    def without_adapters(self) -> "SplitModel":
        """The frozen backbone alone, for comparisons against adapted logits."""
        return self.model_copy(update={"adapters": (None,) * len(self.blocks)})

    def named_tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Every tensor in checkpoint declaration order."""
        yield "embedder.w_patch", self.embedder.w_patch
        yield "embedder.pos", self.embedder.pos
        yield "embedder.cls", self.embedder.cls
        for i, block in enumerate(self.blocks):
            for name in BLOCK_FIELDS:
                yield f"blocks.{i}.{name}", getattr(block, name)
        for i, adapter in enumerate(self.adapters):
            if adapter is None:
                adapter = LoraAdapter.zeros(self.config.D, self.config.r)
            yield f"adapters.{i}.U", adapter.U
            yield f"adapters.{i}.V", adapter.V
        yield "norm_gamma", self.norm_gamma
        yield "norm_beta", self.norm_beta
        yield "head", self.head

    def backbone_tensors(self) -> Dict[str, np.ndarray]:
        return {
            name: t
            for name, t in self.named_tensors()
            if not name.startswith("adapters.") and name != "head"
        }


def tensor_shapes(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Shapes matching :meth:`SplitModel.named_tensors` for ``cfg``."""
    d = cfg.D
    block_shapes = {
        "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
        "w_1": (d, 4 * d), "w_2": (4 * d, d),
        "ln1_gamma": (d,), "ln1_beta": (d,), "ln2_gamma": (d,), "ln2_beta": (d,),
    }
    shapes = [
        ("embedder.w_patch", (cfg.patch_dim, d)),
        ("embedder.pos", (cfg.M + 1, d)),
        ("embedder.cls", (d,)),
    ]
    for i in range(cfg.E):
        shapes += [(f"blocks.{i}.{name}", block_shapes[name]) for name in BLOCK_FIELDS]
    for i in range(cfg.E):
        shapes += [(f"adapters.{i}.U", (d, cfg.r)), (f"adapters.{i}.V", (cfg.r, d))]
    shapes += [("norm_gamma", (d,)), ("norm_beta", (d,)), ("head", (d, cfg.C))]
    return shapes


def assemble(cfg: ModelConfig, tensors: Dict[str, np.ndarray]) -> SplitModel:
    """Build a model from a name -> array mapping laid out by :func:`tensor_shapes`."""
    blocks = tuple(
        BlockParams(**{name: tensors[f"blocks.{i}.{name}"] for name in BLOCK_FIELDS})
        for i in range(cfg.E)
    )
    adapters = tuple(
        LoraAdapter(U=tensors[f"adapters.{i}.U"], V=tensors[f"adapters.{i}.V"])
        for i in range(cfg.E)
    )
    return SplitModel(
        config=cfg,
        embedder=Embedder(
            w_patch=tensors["embedder.w_patch"],
            pos=tensors["embedder.pos"],
            cls=tensors["embedder.cls"],
        ),
        blocks=blocks,
        adapters=adapters,
        norm_gamma=tensors["norm_gamma"],
        norm_beta=tensors["norm_beta"],
        head=tensors["head"],
    )

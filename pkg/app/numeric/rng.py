from enum import IntEnum
from typing import Optional, Sequence, Tuple

import numpy as np


class Stream(IntEnum):
    """Stream tags mixed into the seed so independent consumers never collide"""

    INIT = 1
    DATA = 2
    PARTITION = 3
    ROUND = 4
    BATCH = 5
    QUANT = 6
    CODEC = 7


class Rng:
    """Deterministic random stream.

    Algorithm: numpy's PCG64 bit generator, seeded through
    ``SeedSequence([seed, *keys])``. PCG64 and SeedSequence produce the same
    stream on every platform; derived streams come from :meth:`child`, so a
    per-client stream is a pure function of (run seed, stream, client, round)
    no matter in which order clients are simulated.

    An instance is single-owner: hand each consumer its own child.
    """

    def __init__(self, seed: int, *keys: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.keys: Tuple[int, ...] = tuple(int(k) for k in keys)
        sequence = np.random.SeedSequence([self.seed, *self.keys])
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, keys={self.keys})"

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def uniform(self, size=None) -> np.ndarray:
        """Floats in [0, 1)."""
        return self._generator.random(size)

    def normal(self, std: float = 1.0, size=None) -> np.ndarray:
        return self._generator.normal(0.0, std, size)

    def dirichlet(self, alpha: Sequence[float]) -> np.ndarray:
        return self._generator.dirichlet(alpha)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._generator.choice(n, size=size, replace=replace)

    def integers(self, low: int, high: Optional[int] = None, size=None) -> np.ndarray:
        return self._generator.integers(low, high, size=size)

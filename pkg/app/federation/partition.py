from typing import List

import numpy as np

from app.exceptions import PartitionError
from app.logger import logger
from app.numeric.rng import Rng


def dirichlet_partition(labels, V: int, alpha: float, rng: Rng) -> List[np.ndarray]:
    """Label-skewed split: each class is spread over clients by Dirichlet(alpha * 1_V).

    Class counts are rounded down and the remainder goes to the largest
    fractional parts. A client left with no samples takes one from the
    currently largest shard; each repair is logged.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if V < 1:
        raise PartitionError(f"need at least one client, got V={V}")
    if alpha <= 0:
        raise PartitionError(f"dirichlet alpha must be positive, got {alpha}")
    if n < V:
        raise PartitionError(f"cannot give {V} clients a sample each from {n} samples")

    shards: List[List[int]] = [[] for _ in range(V)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        proportions = rng.dirichlet([alpha] * V)
        counts = np.floor(proportions * idx.size).astype(np.int64)
        remainder = idx.size - int(counts.sum())
        if remainder > 0:
            frac = proportions * idx.size - counts
            # stable sort keeps ties on the lower client id
            counts[np.argsort(-frac, kind="stable")[:remainder]] += 1
        start = 0
        for client, take in enumerate(counts):
            shards[client].extend(idx[start : start + take].tolist())
            start += int(take)

    for client in range(V):
        if not shards[client]:
            donor = max(range(V), key=lambda j: (len(shards[j]), -j))
            shards[client].append(shards[donor].pop())
            logger.warning(
                f"Dirichlet split left client {client} empty; moved one sample from client {donor}"
            )
    return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]


def iid_partition(n: int, V: int, rng: Rng) -> List[np.ndarray]:
    """Shuffle and cut into ``V`` near-equal shards."""
    if V < 1 or n < V:
        raise PartitionError(f"cannot split {n} samples across {V} clients")
    order = rng.permutation(n)
    return [np.sort(part.astype(np.int64)) for part in np.array_split(order, V)]


def shard_sizes(shards: List[np.ndarray]) -> List[int]:
    return [int(s.size) for s in shards]

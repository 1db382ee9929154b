# streams.py
"""Counter-based seed derivation.

A child seed depends only on the root seed and its integer path, so any
replication can be regenerated on its own and results do not depend on
how work is spread over processes.
"""
from typing import Sequence

import numpy as np

SEED_MASK = (1 << 64) - 1


def derive_seed(root: int, *path: int) -> int:
    """64-bit seed for the stream at `path` below `root`"""
    sequence = np.random.SeedSequence(int(root) & SEED_MASK, spawn_key=tuple(int(p) for p in path))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def stream(root: int, *path: int) -> np.random.Generator:
    """Independent generator for the stream at `path` below `root`"""
    return np.random.default_rng(np.random.SeedSequence(int(root) & SEED_MASK,
                                                        spawn_key=tuple(int(p) for p in path)))


def replication_seeds(root: int, count: int, *path: int) -> Sequence[int]:
    """Seeds of replications 0..count-1, identical whatever the pool size"""
    return [derive_seed(root, *path, index) for index in range(count)]

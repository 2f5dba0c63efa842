# data/rng.py
"""Deterministic, splittable random streams.

Every stream is a numpy PCG64 generator seeded from
``SeedSequence(entropy=seed, spawn_key=path)``. A child created with
``fork(label)`` extends the path with the label, so it depends only on the
root seed and the labels leading to it, never on how many values the parent
has already drawn.
"""
from typing import Tuple

import numpy as np

from gapscore.utils.errors import ConfigurationError

MAX_SEED = 2**64 - 1


class SeededRng:
    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        seed = int(seed)
        if seed < 0 or seed > MAX_SEED:
            raise ConfigurationError(f"Seed must be in [0, 2^64), got {seed}")
        if any(int(label) < 0 for label in path):
            raise ConfigurationError(f"Fork labels must be non-negative integers, got {path}")

        self.seed = seed
        self.path = tuple(int(label) for label in path)
        self._sequence = np.random.SeedSequence(entropy=seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(self._sequence))

    def fork(self, *label: int) -> "SeededRng":
        return SeededRng(self.seed, self.path + tuple(label))

    def seed_value(self) -> int:
        """64-bit seed derived from (seed, path), stable across runs"""
        return int(self._sequence.generate_state(1, dtype=np.uint64)[0])

    def sklearn_seed(self) -> int:
        """Integer seed for libraries that only accept a legacy random_state"""
        return int(self._sequence.generate_state(1, dtype=np.uint32)[0])

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path})"


def rng_fork(parent: SeededRng, label: Tuple[int, ...]) -> SeededRng:
    if isinstance(label, int):
        label = (label,)
    return parent.fork(*label)

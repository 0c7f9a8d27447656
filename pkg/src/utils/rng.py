"""
Seed handling: every stochastic routine takes an int seed or a numpy Generator
"""
from typing import Union

import numpy as np

SeedLike = Union[int, np.random.Generator, None]


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for (seed, key...) independent of call order."""
    sequence = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) & 0xFFFFFFFF for k in keys]])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])

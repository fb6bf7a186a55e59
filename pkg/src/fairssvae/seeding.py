"""Named random streams derived from one master seed.

Each consumer draws from ``SeedSequence(seed, spawn_key=(stream id, *key))``
so streams never share state even when callers pass the same seed.
"""
import numpy as np

STREAMS = {"mask": 0, "init": 1, "shuffle": 2, "z": 3, "mc": 4, "gumbel": 5, "split": 6,
           "test": 7, "generate": 8}


def stream(seed: int, name: str, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], *key)))

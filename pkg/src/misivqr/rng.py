"""Seeded, splittable random streams.

Every random quantity in the package is drawn from a stream addressed by
``(seed, purpose, index...)``. Streams with different addresses are
statistically independent, so work can be split across processes in any
order and still reproduce bit-for-bit.
"""

import numpy as np

# purpose tags, the first element of every spawn key
DATA = 0
BOOTSTRAP = 1
REPLICATION = 2

GENERATOR_NAME = "PCG64"


def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream at address ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *key: int) -> int:
    """A 63-bit integer seed derived from ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

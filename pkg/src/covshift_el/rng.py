"""Reproducible random streams.

Every stream is a Philox generator keyed by a master seed and a path of
integers, e.g. ``stream(seed, rep, PURPOSE_DATA)``. Streams with different
paths are statistically independent, so replications, bootstrap resamples and
per-row imputations can run in any order or in parallel and still produce
identical numbers.
"""
from __future__ import annotations

import numpy as np

# Path components used to separate purposes within one replication.
PURPOSE_DATA = 0
PURPOSE_RATIO = 1
PURPOSE_CDE = 2
PURPOSE_IMPUTE = 3
PURPOSE_BOOTSTRAP = 4
PURPOSE_PILOT = 5
PURPOSE_TRUTH = 6


def stream(master_seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed) & (2**64 - 1), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from ``rng`` for deriving further keyed streams."""
    return int(rng.integers(0, 2**63 - 1))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        raise TypeError("an explicit seed or Generator is required")
    return stream(int(rng))

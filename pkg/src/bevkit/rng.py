"""Deterministic, named random streams.

Every stochastic stage derives its own generator from (seed, *tags) so that
per-scene work can run in any order, or in parallel, without changing a
single output byte.
"""

from __future__ import annotations

import zlib

import numpy as np


def seeded_rng(seed: int, *tags) -> np.random.Generator:
    """Generator keyed by an integer seed plus arbitrary string/int tags."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            entropy.append(int(tag) & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(tag).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(entropy))

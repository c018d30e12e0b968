"""Seedable, splittable random streams.

Streams are Philox counter-based generators keyed through numpy's
SeedSequence, so ``substream(seed, i)`` is independent of every other ``i``
and reproducible across processes.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "numpy-Philox4x64-10/SeedSequence"


def substream(seed: int, *keys: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))

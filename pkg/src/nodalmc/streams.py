"""Counter-based random streams.

Every random draw is addressed by ``(seed, tag, block, epoch)``. A walker
block is a fixed slice of the population, so the numbers a walker sees do not
depend on how blocks are scheduled across threads.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

_MASK64 = (1 << 64) - 1


class Tag(IntEnum):
    INIT = 1
    MOVE = 2
    RESAMPLE = 3
    CONTINUE = 4
    VMC = 5
    BRIDGE = 6


def stream(seed: int, tag: int, block: int = 0, epoch: int = 0) -> np.random.Generator:
    """Independent Philox generator for one ``(seed, tag, block, epoch)`` address."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    key = (int(seed) & _MASK64) | (int(tag) << 64)
    counter = ((int(block) & _MASK64) << 64) | ((int(epoch) & _MASK64) << 128)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def block_slices(n: int, block_size: int) -> list[slice]:
    """Contiguous fixed-size slices covering ``range(n)``."""
    return [slice(s, min(s + block_size, n)) for s in range(0, n, block_size)]

"""64-bit seed mixing (splitmix64) so per-item seeds do not depend on scheduling."""
from __future__ import annotations

import random

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def mix(seed: int, *items: int) -> int:
    """Fold integers into a seed: mix(seed, i) = splitmix64(splitmix64(seed) ^ i), iterated."""
    h = splitmix64(seed & MASK64)
    for item in items:
        h = splitmix64(h ^ (item & MASK64))
    return h


def item_rng(seed: int, index: int) -> random.Random:
    return random.Random(mix(seed, index))

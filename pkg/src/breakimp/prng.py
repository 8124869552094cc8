"""Portable seeded randomness: SplitMix64 plus an unbiased Fisher-Yates.

The generator is SplitMix64 (Steele, Lea, Flood 2014) with its published
constants. Every shuffle in the toolkit draws from it, so a given seed yields
the same permutation in any implementation that follows these three rules:

* ``next()`` advances the state by 0x9E3779B97F4A7C15 and returns the mixed
  state;
* ``below(n)`` rejects outputs smaller than ``2**64 mod n`` and returns
  ``x mod n`` for the first accepted output;
* ``shuffle`` walks ``i`` from ``len - 1`` down to 1, swapping slot ``i`` with
  slot ``below(i + 1)``.
"""
from __future__ import annotations

from typing import MutableSequence

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("bound must be positive")
        threshold = (1 << 64) % n
        while True:
            x = self.next()
            if x >= threshold:
                return x % n

    def shuffle(self, items: MutableSequence) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


def derive_seed(seed: int, attempt: int) -> int:
    """Seed for retry number ``attempt``; attempt 0 is the seed itself."""
    if attempt == 0:
        return seed & MASK64
    return SplitMix64(seed ^ ((attempt * GOLDEN_GAMMA) & MASK64)).next()

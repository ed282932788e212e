"""Seeded xoshiro256** generator shared by every stochastic step.

The state is seeded from a 64-bit integer through splitmix64, so identical
seeds give identical streams on every platform.  Bulk draws go through a
compiled kernel; ``next_u64`` is the scalar reference path.
"""

from __future__ import annotations

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> tuple[int, int]:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


@njit(cache=True)
def _fill_u64(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.shape[0]):
        x = s1 * np.uint64(5)
        x = (x << np.uint64(7)) | (x >> np.uint64(57))
        out[i] = x * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


class RandomSource:
    """xoshiro256** stream.

    >>> a, b = RandomSource(7), RandomSource(7)
    >>> a.next_u64() == b.next_u64()
    True
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        x = self.seed
        words = []
        for _ in range(4):
            x, z = _splitmix64(x)
            words.append(z)
        self._state = np.array(words, dtype=np.uint64)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = (int(v) for v in self._state)
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._state[:] = np.array([s0, s1, s2, s3], dtype=np.uint64)
        return result

    def u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _fill_u64(self._state, out)
        return out

    def random(self, shape=()) -> np.ndarray:
        """Uniform float64 draws in [0, 1) with 53 bits of mantissa."""
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError(f"randbelow needs n > 0, got {n}")
        # rejection sampling keeps the draw unbiased
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        self.shuffle(items)
        return items

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, items: list, k: int) -> list:
        """``k`` distinct items, in draw order."""
        pool = list(items)
        if k > len(pool):
            raise ValueError(f"cannot sample {k} of {len(pool)} items")
        for i in range(k):
            j = i + self.randbelow(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def spawn(self, tag: int) -> "RandomSource":
        """Independent child stream derived from this stream's seed and ``tag``."""
        _, z = _splitmix64((self.seed ^ ((tag * 0xD1342543DE82EF95) & MASK64)) & MASK64)
        return RandomSource(z)

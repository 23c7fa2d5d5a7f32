"""Counter-based SplitMix64 generator.

Word ``i`` of the stream for seed ``s`` is ``mix(s + (i + 1) * GAMMA)`` with
the SplitMix64 finalizer, all arithmetic modulo 2**64. Uniforms take the top
53 bits; normals use Box-Muller on consecutive uniform pairs. Nothing here
depends on the platform RNG, so a seed maps to the same stream everywhere.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, start: int, n: int) -> np.ndarray:
    """Words ``start .. start+n-1`` of the stream for ``seed`` as uint64."""
    counters = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    z = np.uint64(seed & _MASK64) + counters * _GAMMA
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Stateful view over the SplitMix64 stream; ``counter`` is the next word index."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def _words(self, n: int) -> np.ndarray:
        out = splitmix64(self.seed, self.counter, n)
        self.counter += n
        return out

    def uniform(self, shape=()) -> np.ndarray:
        """Float64 uniforms in [0, 1)."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(shape)

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform((2 * m,))
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n].reshape(shape).astype(dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high)."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape)
        return (low + np.floor(u * span)).astype(np.int64)

    def randint(self, low: int, high: int) -> int:
        return int(self.integers(low, high, (1,))[0])

    def truncated_normal(self, shape, std: float, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) resampled until every value lies within ``bound`` std."""
        out = self.normal(shape, dtype=np.float64)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.normal((int(bad.sum()),), dtype=np.float64)
            bad = np.abs(out) > bound
        return (out * std).astype(np.float32)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from this seed and ``key``."""
        mixed = int(splitmix64(self.seed ^ 0x5851F42D4C957F2D, int(key) & _MASK64, 1)[0])
        return Rng(mixed)

"""Deterministic random streams built on the SplitMix64 mixer.

Every stochastic choice in the package (synthetic data, shuffling,
subsampling, parameter init) draws from one of these streams so that a
single integer seed reproduces a run bit-for-bit, independent of numpy's
generator internals.  The generator is the standard SplitMix64 sequence:
state advances by the 64-bit golden gamma 0x9E3779B97F4A7C15 and each
output is the finalizer z ^= z>>30, *0xBF58476D1CE4E5B9, z ^= z>>27,
*0x94D049BB133111EB, z ^= z>>31.
"""
from __future__ import annotations

import math

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1

# Stream tags keep independent uses of the same base seed from colliding.
INIT_STREAM = 1
SHUFFLE_STREAM = 2
SAMPLE_STREAM = 3
SYNTH_STREAM = 4
CHECK_STREAM = 5


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """Sequential SplitMix64 stream over a 64-bit state."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    @classmethod
    def stream(cls, seed: int, tag: int) -> "SplitMix64":
        """Derive an independent stream for (seed, purpose-tag)."""
        return cls(_mix((seed + tag * _GAMMA) & _MASK))

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix(self._state)

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53 random mantissa bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) without modulo bias."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % bound

    def normal(self) -> float:
        """Standard normal via Box-Muller (one value per call)."""
        u1 = 1.0 - self.uniform()  # in (0, 1], log is safe
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if np.ndim(shape) else int(shape)
        out = np.array([self.normal() for _ in range(n)], dtype=np.float64)
        return out.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        idx = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), returned in ascending order.

        Ascending order keeps subsampled datasets in their original row
        order, which makes file-level determinism checks trivial.
        """
        if k > n:
            raise ValueError(f"cannot sample {k} from {n}")
        idx = np.arange(n, dtype=np.int64)
        for i in range(k):
            j = i + self.below(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return np.sort(idx[:k])

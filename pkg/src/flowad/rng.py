"""Deterministic pseudo-random generator shared by all stochastic stages.

The generator is xoshiro256** (Blackman & Vigna), seeded through splitmix64.
Both algorithms are fixed, public and documented, so a given seed produces
bit-identical streams on every platform and library version.  Everything
random in this package (weight init, batch shuffling, sampling, anomaly
injection) draws from an instance of :class:`Xoshiro256`.
"""
from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_DOUBLE_UNIT = 2.0 ** -53


def _splitmix64(state: int):
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def derive_seed(seed: int, label: str) -> int:
    """Derive a deterministic sub-seed for a named stage from a master seed."""
    state = seed & _MASK64
    for ch in label.encode("utf-8"):
        state, _ = _splitmix64(state ^ ch)
    _, out = _splitmix64(state)
    return out


class Xoshiro256:
    """xoshiro256** generator with float64 helpers.

    Normal variates use the Box-Muller transform with a cached spare so the
    stream consumption is deterministic.
    """

    def __init__(self, seed: int):
        state = seed & _MASK64
        self._s = []
        for _ in range(4):
            state, out = _splitmix64(state)
            self._s.append(out)
        if not any(self._s):  # all-zero state is the one forbidden state
            self._s[0] = 0x9E3779B97F4A7C15
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * _DOUBLE_UNIT

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        if size is None:
            return low + (high - low) * self.random()
        n = int(np.prod(size))
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = low + (high - low) * self.random()
        return out.reshape(size)

    def _normal_scalar(self) -> float:
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # u1 in (0, 1] so the log is finite
        u1 = ((self.next_u64() >> 11) + 1) * _DOUBLE_UNIT
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = r * math.sin(theta)
        return r * math.cos(theta)

    def normal(self, size=None, mean: float = 0.0, std: float = 1.0):
        if size is None:
            return mean + std * self._normal_scalar()
        n = int(np.prod(size))
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = mean + std * self._normal_scalar()
        return out.reshape(size)

    def exponential(self, scale: float = 1.0, size=None):
        if size is None:
            u = ((self.next_u64() >> 11) + 1) * _DOUBLE_UNIT
            return -scale * math.log(u)
        n = int(np.prod(size))
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            u = ((self.next_u64() >> 11) + 1) * _DOUBLE_UNIT
            out[i] = -scale * math.log(u)
        return out.reshape(size)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection on a bitmask (unbiased)."""
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        mask = (1 << (n - 1).bit_length()) - 1
        while True:
            r = self.next_u64() & mask
            if r < n:
                return r

    def shuffle(self, seq) -> None:
        """In-place Fisher-Yates shuffle of a list or 1-D array."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randbelow(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        self.shuffle(idx)
        return np.asarray(idx, dtype=np.int64)

    def sample(self, n: int, k: int) -> list[int]:
        """k distinct indices drawn from range(n), in draw order."""
        if k > n:
            raise ValueError(f"cannot sample {k} from {n}")
        pool = list(range(n))
        out = []
        for _ in range(k):
            j = self.randbelow(len(pool))
            out.append(pool.pop(j))
        return out

    def spawn(self, label: str) -> "Xoshiro256":
        """Independent child generator for a named sub-stage."""
        return Xoshiro256(derive_seed(self.next_u64(), label))

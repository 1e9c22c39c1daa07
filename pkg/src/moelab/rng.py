"""Deterministic, order-independent random number generation.

All randomness in the package flows through a counter-based splitmix64
generator: output i of a stream with seed s is ``finalize(s + (i+1)*GOLDEN)``.
Because each output depends only on (seed, index), any block of draws can be
produced in one vectorized pass and is independent of execution order or
host parallelism. Substreams are derived by hashing a text label into the
seed (FNV-1a, then the splitmix64 finalizer as an avalanche step), so
distinct consumers never share a stream by accident.

Gaussians use Box-Muller on consecutive uniform pairs. Bit-level equality is
promised within this implementation only, not across languages or libraries.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64_finalize(z: int) -> int:
    """splitmix64 finalizer: avalanches a 64-bit value."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & MASK64
    return h


def derive_seed(seed: int, label: str) -> int:
    """Deterministically derive a substream seed from (seed, label)."""
    return splitmix64_finalize((seed ^ fnv1a64(label.encode("utf-8"))) & MASK64)


def _block_u64(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs [start, start+count) of the splitmix64 stream, vectorized."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = np.uint64(seed & MASK64) + idx * np.uint64(_GOLDEN)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


class Stream:
    """Sequential view over a counter-based splitmix64 stream."""

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self._pos = 0

    def u64(self, count: int) -> np.ndarray:
        out = _block_u64(self.seed, self._pos, count)
        self._pos += count
        return out

    def uniform01(self, count: int) -> np.ndarray:
        """Uniforms in [0, 1), 53-bit resolution."""
        return (self.u64(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, lo: float, hi: float, count: int) -> np.ndarray:
        return lo + (hi - lo) * self.uniform01(count)

    def normal(self, count: int, std: float = 1.0) -> np.ndarray:
        """Standard normals via Box-Muller, scaled by ``std``."""
        pairs = (count + 1) // 2
        u = self.uniform01(2 * pairs)
        # shift u1 into (0, 1] so log() stays finite
        u1 = 1.0 - u[:pairs]
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return std * z[:count]

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) via 64-bit sort keys.

        Stable argsort of distinct keys is an unbiased shuffle up to the
        negligible chance of key collisions; ties resolve by index, keeping
        the result deterministic either way.
        """
        keys = self.u64(n)
        return np.argsort(keys, kind="stable")

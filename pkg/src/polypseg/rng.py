"""Deterministic random number generation.

A single fixed algorithm (SplitMix64 used as a counter-based generator) is
used everywhere so that checkpoints, synthetic datasets and dropout masks
are bit-reproducible for a given seed, independent of platform RNG details.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix(z: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer; input/output are uint64 arrays.
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _fnv1a(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


class Rng:
    """Counter-based SplitMix64 stream.

    The k-th raw draw is ``mix(seed + k * golden_ratio)``, so the sequence is
    a pure function of (seed, draw index) and identical across runs and
    platforms. ``derive`` builds statistically independent child streams from
    the construction seed plus a key path, without consuming draws from the
    parent.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self._count = 0

    def __repr__(self):
        return f"Rng(seed={self.seed}, draws={self._count})"

    def derive(self, *keys) -> "Rng":
        """Child stream keyed by ints/strings; independent of draw position."""
        s = np.uint64(self.seed)
        with np.errstate(over="ignore"):
            for key in keys:
                if isinstance(key, str):
                    h = np.uint64(_fnv1a(key))
                elif isinstance(key, (int, np.integer)):
                    h = np.uint64(int(key) & _MASK)
                else:
                    raise InvalidArgumentError(
                        f"derive keys must be int or str, got {type(key).__name__}")
                s = _mix(np.uint64((int(s + _GOLDEN) & _MASK) ^ int(h)))
        return Rng(int(s))

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw uint64 draws."""
        if n < 0:
            raise InvalidArgumentError("draw count must be non-negative")
        with np.errstate(over="ignore"):
            ctr = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
            out = _mix(np.uint64(self.seed) + _GOLDEN * ctr)
        self._count += n
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def uniform_range(self, lo: float, hi: float, n: int | None = None):
        u = self.uniform(1 if n is None else n) * (hi - lo) + lo
        return float(u[0]) if n is None else u

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        """Standard normals via Box-Muller on paired uniforms."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        # u1 shifted into (0, 1] so log() is always finite.
        u1 = ((self.raw(m) >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        a = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(a), r * np.sin(a)])[:n]
        return z.reshape(shape).astype(dtype)

    def integer_below(self, bound: int) -> int:
        """Uniform-ish integer in [0, bound); modulo bias is negligible for
        the small bounds used here and keeps the draw count fixed."""
        if bound <= 0:
            raise InvalidArgumentError("bound must be positive")
        return int(self.raw(1)[0] % np.uint64(bound))

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        idx = np.arange(n)
        if n < 2:
            return idx
        draws = self.raw(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            idx[i], idx[j] = idx[j], idx[i]
        return idx

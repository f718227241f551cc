"""Deterministic pseudorandom streams built on the SplitMix64 mixer.

Every stochastic step in the pipeline (phantom noise, stub extractor
weights, network initialization, shuffles, fold splits) draws from these
streams so that a run is a pure function of its seeds, reproducible
across platforms and processes.

Stream layout: a stream with seed ``s`` produces the 64-bit words
``mix64(s + i * GOLDEN)`` for i = 1, 2, ... where ``mix64`` is the
SplitMix64 finalizer. Uniform doubles take the top 53 bits of a word;
Gaussian pairs come from Box-Muller on consecutive uniforms.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_INV_2_53 = 2.0 ** -53


def splitmix64(x: int) -> int:
    """One SplitMix64 step: advance ``x`` by the golden gamma and finalize."""
    z = (int(x) + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return (z ^ (z >> 31)) & MASK64


def derive_seed(base: int, *parts: int) -> int:
    """Fold integer tags into ``base`` to get a decorrelated child seed.

    Used to give each (subject, metric), (repeat, fold, branch), ...
    its own independent stream without shared state.
    """
    s = int(base) & MASK64
    for p in parts:
        s = splitmix64(s ^ ((int(p) + 1) & MASK64))
    return s


def fnv1a64(text: str) -> int:
    """FNV-1a 64-bit hash; stable identity key for subject ids."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64Stream:
    """Sequential generator over the SplitMix64 output sequence of a seed.

    Scalar draws and the vectorized bulk draws walk the same sequence:
    ``uniforms(2)`` consumes exactly the words two ``next_u64`` calls
    would, so mixing scalar and bulk access stays reproducible.
    """

    def __init__(self, seed: int):
        self._state = int(seed) & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + GOLDEN) & MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & MASK64
        return (z ^ (z >> 31)) & MASK64

    def _next_words(self, n: int) -> np.ndarray:
        # uint64 array arithmetic wraps mod 2**64, matching the scalar path
        start = self._state
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(start & MASK64) + idx * np.uint64(GOLDEN)
        self._state = (start + n * GOLDEN) & MASK64
        return _mix_array(z)

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` float64 uniforms in [0, 1)."""
        words = self._next_words(n)
        return (words >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def gaussians(self, n: int) -> np.ndarray:
        """``n`` standard-normal float64 draws via Box-Muller.

        Consumes 2 * ceil(n/2) uniforms; pair (u1, u2) yields
        (r cos t, r sin t) with r = sqrt(-2 ln(1 - u1)), t = 2 pi u2.
        """
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def below(self, bound: int) -> int:
        """Integer in [0, bound) by modulo reduction (bias negligible here)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % bound

    def shuffled(self, items: list) -> list:
        """Fisher-Yates shuffle, returned as a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

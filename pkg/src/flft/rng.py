"""Portable seeded permutations.

Splits and per-epoch shuffles must be reproducible by any implementation,
so they do not depend on numpy's generator internals. The generator is
SplitMix64 (Steele, Lea & Flood 2014): a 64-bit counter advanced by the
golden-gamma constant ``0x9E3779B97F4A7C15`` and finalised with the
``(30, 27, 31)`` xor-shift/multiply mix. Permutations are produced with the
Durstenfeld form of Fisher-Yates: for ``i = n-1 .. 1`` swap position ``i``
with ``j = bounded(i + 1)``, where ``bounded(m)`` draws 64-bit outputs,
rejects any below ``(2**64 - m) % m`` and returns the survivor ``% m``.
"""

import numpy as np
from numba import njit

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class SplitMix64:
    """Stateful SplitMix64 stream. ``seed`` may be any Python int."""

    def __init__(self, seed):
        self.state = int(seed) & _MASK

    def next_u64(self):
        self.state = (self.state + _GAMMA) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK
        return z ^ (z >> 31)

    def bounded(self, m):
        """Unbiased integer in ``[0, m)``."""
        if m <= 0:
            raise ValueError("bound must be positive")
        threshold = ((1 << 64) - m) % m
        while True:
            r = self.next_u64()
            if r >= threshold:
                return r % m

    def permutation(self, n):
        """Fisher-Yates permutation of ``range(n)`` as an int64 array."""
        perm = np.arange(n, dtype=np.int64)
        new_state = _permute_inplace(perm, np.uint64(self.state))
        self.state = int(new_state)
        return perm


@njit(cache=True)
def _next(state):
    state = state + np.uint64(0x9E3779B97F4A7C15)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return state, z ^ (z >> np.uint64(31))


@njit(cache=True)
def _permute_inplace(perm, state):
    n = perm.shape[0]
    for i in range(n - 1, 0, -1):
        m = np.uint64(i + 1)
        threshold = (np.uint64(0) - m) % m
        while True:
            state, r = _next(state)
            if r >= threshold:
                break
        j = np.int64(r % m)
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    return state

"""Deterministic RNG construction shared across modules.

All stochastic components derive their generators from a user seed through
splitmix64, so distinct job/chain indices get decorrelated streams while the
(seed, index) -> stream mapping stays reproducible bit-for-bit.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 step; maps any 64-bit integer to a well-mixed 64-bit hash."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def derived_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Counter-based generator for job/chain `index` derived from `seed`."""
    key = splitmix64((int(seed) + int(index)) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))

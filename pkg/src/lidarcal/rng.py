"""Portable seeded random numbers.

Only the raw 64-bit output of numpy's Philox4x64-10 bit generator is used:
uniforms are ``(x >> 11) * 2**-53`` and Gaussians come from the Box-Muller
transform evaluated with the ``math`` module, element by element.  That keeps
results bitwise reproducible independent of numpy's distribution code or SIMD
dispatch.
"""

from __future__ import annotations

import math

import numpy as np


class PortableRandom:
    """Philox4x64-10 stream with hand-rolled uniform and normal sampling."""

    def __init__(self, seed: int):
        self._bits = np.random.Philox(key=int(seed) & (2**64 - 1))

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        out = np.empty(2 * pairs)
        for i in range(pairs):
            u1 = 1.0 - u[2 * i]  # (0, 1]
            radius = math.sqrt(-2.0 * math.log(u1))
            angle = 2.0 * math.pi * u[2 * i + 1]
            out[2 * i] = radius * math.cos(angle)
            out[2 * i + 1] = radius * math.sin(angle)
        return out[:n]

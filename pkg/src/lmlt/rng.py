"""Deterministic pseudo-random streams based on splitmix64.

The generator is a pure function of a 64-bit counter, so scalar and
vectorized draws produce the same stream:

    state <- (state + 0x9E3779B97F4A7C15) mod 2^64
    z <- state
    z <- (z xor z>>30) * 0xBF58476D1CE4E5B9   (mod 2^64)
    z <- (z xor z>>27) * 0x94D049BB133111EB   (mod 2^64)
    output = z xor z>>31

Doubles in [0, 1) take the top 53 bits: (raw >> 11) * 2^-53.

Normal draws use the Box-Muller transform on raw pairs (r1, r2):
u1 = ((r1 >> 11) + 1) * 2^-53 in (0, 1], u2 = (r2 >> 11) * 2^-53,
rho = sqrt(-2 ln u1), z0 = rho*cos(2*pi*u2), z1 = rho*sin(2*pi*u2).
Array fills of n normals consume exactly 2*ceil(n/2) raw values; the
trailing z1 of an odd-sized fill is discarded.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV53 = 2.0 ** -53


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """splitmix64 stream; identical seeds give bit-identical sequences."""

    __slots__ = ("_state", "_pending")

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK64
        self._pending: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix(self._state)

    def next_f64(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * _INV53

    def uniform(self, a: float = 0.0, b: float = 1.0) -> float:
        return a + (b - a) * self.next_f64()

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        """One Box-Muller draw; the paired value is stashed for the next call."""
        if self._pending is not None:
            z, self._pending = self._pending, None
            return mu + sigma * z
        u1 = ((self.next_u64() >> 11) + 1) * _INV53
        u2 = (self.next_u64() >> 11) * _INV53
        rho = math.sqrt(-2.0 * math.log(u1))
        self._pending = rho * math.sin(2.0 * math.pi * u2)
        return mu + sigma * rho * math.cos(2.0 * math.pi * u2)

    # Vectorized draws; bit-identical to the scalar path.

    def raw(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs as a uint64 array."""
        if n < 0:
            raise ValueError("n must be non-negative")
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + idx * np.uint64(_GAMMA)
        self._state = (self._state + n * _GAMMA) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def uniforms(self, n: int, a: float = 0.0, b: float = 1.0) -> np.ndarray:
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV53
        return a + (b - a) * u

    def normals(self, n: int, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        pairs = (n + 1) // 2
        r = self.raw(2 * pairs)
        u1 = ((r[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53
        u2 = (r[1::2] >> np.uint64(11)).astype(np.float64) * _INV53
        rho = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = rho * np.cos(2.0 * np.pi * u2)
        z[1::2] = rho * np.sin(2.0 * np.pi * u2)
        return mu + sigma * z[:n]

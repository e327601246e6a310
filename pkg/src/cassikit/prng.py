"""SplitMix64 generator shared by every seeded routine in the package.

The k-th output only depends on ``seed + k * GOLDEN``, so blocks of draws can
be produced with vectorised uint64 arithmetic and still agree bit-for-bit
with the scalar recurrence.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

_TWO64 = float(2**64)


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Scalar and block SplitMix64 stream.

    Parameters
    ----------
    seed : int
        Any integer; reduced modulo 2**64.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return _mix(self.state)

    def uniform(self) -> float:
        """Next draw as ``next() / 2**64`` in [0, 1)."""
        return self.next() / _TWO64

    def next_block(self, n: int) -> np.ndarray:
        """Next ``n`` raw outputs as uint64, advancing the stream by ``n``."""
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN) & MASK64
        return z

    def uniform_block(self, n: int) -> np.ndarray:
        # float64 conversion of a uint64 rounds to nearest, exactly like the
        # scalar path's int / float division.
        return self.next_block(n).astype(np.float64) / _TWO64

    def normal_block(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller.

        Draws are consumed in pairs ``(u1, u2)``; pair j yields
        ``r cos(2 pi u2)`` at position 2j and ``r sin(2 pi u2)`` at 2j + 1,
        with ``r = sqrt(-2 log(1 - u1))``. An odd tail discards the sine.
        """
        pairs = (n + 1) // 2
        u = self.uniform_block(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:n]

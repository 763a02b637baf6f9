"""Portable pseudo-random numbers.

Every random draw in the package (weight init, dataset synthesis, episode
sampling) comes from :class:`SplitMix64` so that a seed reproduces the same
stream on any platform and in any language. The recurrence is::

    state <- state + 0x9E3779B97F4A7C15            (mod 2**64)
    z     <- state
    z     <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9  (mod 2**64)
    z     <- (z ^ (z >> 27)) * 0x94D049BB133111EB  (mod 2**64)
    out   <- z ^ (z >> 31)

Derived values:

* ``uniform()``   = ``(out >> 11) * 2**-53``, a double in [0, 1)
* ``below(n)``    = ``floor(uniform() * n)``
* ``normal()``    = Box-Muller on two consecutive uniforms ``u1, u2``:
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based 64-bit generator; draws are vectorised with numpy."""

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def __repr__(self):
        return f"SplitMix64(state={self.state:#x})"

    def random_u64(self, size: int) -> np.ndarray:
        size = int(size)
        steps = np.arange(1, size + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix(z)
        self.state = (self.state + size * GAMMA) & MASK64
        return out

    def next_u64(self) -> int:
        return int(self.random_u64(1)[0])

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        u = (self.random_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def below(self, n: int, size=None):
        """Integers drawn uniformly from ``[0, n)``."""
        if n < 1:
            raise ValueError(f"below() needs n >= 1, got {n}")
        u = self.uniform(1 if size is None else size)
        k = np.minimum(np.floor(u * n).astype(np.int64), n - 1)
        return int(k[0]) if size is None else k

    def normal(self, size=None, mean: float = 0.0, std: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        u = self.uniform(2 * n).reshape(n, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        z = mean + std * z
        return float(z[0]) if size is None else z.reshape(size)

    def choice(self, n: int, k: int) -> list[int]:
        """``k`` distinct integers from ``range(n)`` (partial Fisher-Yates)."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def shuffle(self, items: list) -> list:
        order = self.choice(len(items), len(items))
        return [items[i] for i in order]

    def spawn(self, key: int) -> "SplitMix64":
        """Independent child stream; does not advance this generator."""
        with np.errstate(over="ignore"):
            z = _mix(np.array([(self.state ^ (int(key) * GAMMA)) & MASK64], dtype=np.uint64))
        return SplitMix64(int(z[0]))

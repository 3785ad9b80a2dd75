"""Seeded random stream: SplitMix64 seeding into xoshiro256**.

Draw order is part of the contract (datasets must be reproducible bit for
bit), so every consumer pulls numbers through the methods below:

* ``uniform`` takes one raw 64-bit draw per value: ``(x >> 11) * 2**-53``.
* ``normal`` takes uniforms in pairs ``(u1, u2)`` and emits
  ``r*cos(t), r*sin(t)`` with ``r = sqrt(-2 ln(1 - u1))``, ``t = 2 pi u2``;
  an odd request discards the final sine.
* ``integer(lo, hi)`` (inclusive) takes one uniform: ``lo + floor(u*(hi-lo+1))``.
* ``shuffle`` is Fisher-Yates from the last index down, one ``integer`` per step.
"""

import numpy as np

from . import _kernels
from .errors import ValidationError

_MASK64 = (1 << 64) - 1


def splitmix64(x):
    """Advance a SplitMix64 state. Returns ``(new_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


class RandomStream:
    algorithm = "splitmix64+xoshiro256**"

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed <= _MASK64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        words = []
        x = seed
        for _ in range(4):
            x, out = splitmix64(x)
            words.append(out)
        self.state = np.array(words, dtype=np.uint64)

    def next_u64(self) -> int:
        return int(_kernels.raw_fill(self.state, 1)[0])

    def raw(self, n: int) -> np.ndarray:
        return _kernels.raw_fill(self.state, n)

    def uniform(self, lo=0.0, hi=1.0, n=1) -> np.ndarray:
        if not lo < hi:
            raise ValidationError(f"uniform needs lo < hi, got [{lo}, {hi})")
        u = _kernels.uniform_fill(self.state, n)
        if lo == 0.0 and hi == 1.0:
            return u
        out = lo + (hi - lo) * u
        # rounding can land exactly on hi
        np.minimum(out, np.nextafter(hi, lo), out=out)
        return out

    def normal(self, n: int) -> np.ndarray:
        return _kernels.normal_fill(self.state, n)

    def integer(self, lo: int, hi: int) -> int:
        u = _kernels.uniform_fill(self.state, 1)[0]
        return lo + int(u * (hi - lo + 1))

    def shuffle(self, items):
        """In-place Fisher-Yates shuffle of a list or 1-d array."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integer(0, i)
            items[i], items[j] = items[j], items[i]
        return items

    def permutation(self, n: int) -> np.ndarray:
        return self.shuffle(np.arange(n))


def rng_uniform(stream: RandomStream, lo: float, hi: float, n: int) -> np.ndarray:
    return stream.uniform(lo, hi, n)

"""Platform-independent SplitMix64 pseudo-random generator.

The generator is counter based: the k-th output (k = 1, 2, ...) is
``mix(seed + k * GAMMA mod 2**64)``, which lets :meth:`Rng.random` produce
blocks of draws with numpy while remaining bit-identical to repeated
scalar calls.  Uniform reals use the top 53 bits, ``(z >> 11) * 2**-53``,
so every draw lies in ``[0, 1)``.
"""

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 1.0 / (1 << 53)


def mix64(z):
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z):
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_M1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def derive_seed(base_seed, index):
    """Child seed for task ``index`` of a run seeded with ``base_seed``."""
    return mix64((base_seed & MASK64) ^ mix64(index * GAMMA + 1))


class Rng:
    """Single-owner SplitMix64 stream.

    Parameters
    ----------
    seed : int
        Any integer; reduced modulo 2**64.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & MASK64
        self._state = self.seed

    def next_u64(self):
        self._state = (self._state + GAMMA) & MASK64
        return mix64(self._state)

    def uniform(self, low=0.0, high=1.0):
        """One draw from ``[low, high)``."""
        u = (self.next_u64() >> 11) * _INV53
        return low + u * (high - low)

    def below(self, n):
        """Integer uniform on ``{0, ..., n-1}`` from a single draw."""
        return min(int(self.uniform() * n), n - 1)

    def random(self, size):
        """``size`` uniform draws on [0, 1) as a float64 array (may be a shape tuple)."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        k = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self._state) + k * np.uint64(GAMMA)
            z = _mix64_array(states)
        self._state = (self._state + count * GAMMA) & MASK64
        return ((z >> np.uint64(11)).astype(np.float64) * _INV53).reshape(shape)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def __repr__(self):
        return f"Rng(seed={self.seed})"

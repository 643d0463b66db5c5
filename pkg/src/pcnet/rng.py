"""Counter-based pseudo-random streams used everywhere reproducibility matters.

The generator is a SplitMix64 sequence: word ``k`` of stream ``i`` under root
seed ``s`` is

    mix64(mix64(s ^ (GAMMA * (i + 1))) + GOLDEN * (k + 1))   (mod 2**64)

with the standard finalizer constants below.  Because every word is a pure
function of (seed, stream, counter), corruption sets and synthetic datasets
are bit-identical across runs, platforms and worker counts, and per-image
streams can be evaluated in any order.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
GAMMA = 0xD1B54A32D192ED03
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_MASK = (1 << 64) - 1
_U64 = np.uint64
_INV_2_53 = float(2.0**-53)


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer (Python int arithmetic)."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 array ops wrap modulo 2**64 without warnings, unlike scalars
    z = z.astype(np.uint64, copy=True)
    z ^= z >> _U64(30)
    z *= _U64(_MIX1)
    z ^= z >> _U64(27)
    z *= _U64(_MIX2)
    z ^= z >> _U64(31)
    return z


def stream_key(seed: int, stream: int) -> int:
    """Key identifying stream ``stream`` under ``seed`` (stream-split step)."""
    return mix64((seed & _MASK) ^ ((GAMMA * (stream + 1)) & _MASK))


class Stream:
    """One independent random stream addressed by (seed, stream index).

    Draws advance an internal counter; all values come from the documented
    counter-based sequence, so a stream yields the same numbers no matter
    what other streams were consumed before it.
    """

    def __init__(self, seed: int, stream: int = 0):
        self._key = stream_key(seed, stream)
        self._counter = 0

    def _words(self, n: int) -> np.ndarray:
        ks = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64_array(_U64(self._key) + _U64(GOLDEN) * ks)

    def uniform(self, size) -> np.ndarray:
        """Uniform f64 in [0, 1) with 53-bit mantissas, shaped ``size``."""
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        u = (self._words(n) >> _U64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(size)

    def normal(self, size) -> np.ndarray:
        """Standard normal via Box-Muller on consecutive uniform pairs."""
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:m]))  # 1-u avoids log(0)
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(size)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        """Uniform integers in [low, high) by scaling the 53-bit uniforms."""
        u = self.uniform(size)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def poisson(self, lam: np.ndarray) -> np.ndarray:
        """Poisson counts via inversion on exponential interarrival sums.

        Exact for any rate; iteration count grows with max(lam), which stays
        small for image-scale event rates.
        """
        lam = np.asarray(lam, dtype=np.float64)
        counts = np.zeros(lam.shape, dtype=np.int64)
        total = np.zeros(lam.shape, dtype=np.float64)
        active = lam > 0
        while active.any():
            u = self.uniform(lam.shape)
            total[active] += -np.log(1.0 - u[active])
            arrived = active & (total < lam)
            counts[arrived] += 1
            active = arrived
        return counts

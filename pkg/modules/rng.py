"""
Reproducible random streams.

A stream is keyed by (master seed, key). The key is hashed with BLAKE2b-64,
XORed into the master seed and whitened with SplitMix64 to give the stream
seed. The generator is xoshiro256** run as LANES independent lanes whose
256-bit states are the consecutive SplitMix64 outputs of the stream seed;
lane outputs are read step-major (step 0 of lanes 0..LANES-1, then step 1,
...). Gaussian variates use the Marsaglia polar method on consecutive
uniform pairs. All of it is integer arithmetic on uint64 arrays, so the
sequences are identical on every platform.
"""
import hashlib
from typing import Hashable, Tuple, Union

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
LANES = 1024

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = 1.0 / (1 << 53)

Size = Union[int, Tuple[int, ...]]


def _u(k: int) -> np.uint64:
    return np.uint64(k)


def splitmix64(seed: int, count: int) -> np.ndarray:
    """The first `count` outputs of SplitMix64 started from `seed`."""
    with np.errstate(over="ignore"):
        z = np.full(count, seed & MASK64, dtype=np.uint64) + _GOLDEN * np.arange(1, count + 1, dtype=np.uint64)
        z = (z ^ (z >> _u(30))) * _MIX1
        z = (z ^ (z >> _u(27))) * _MIX2
        return z ^ (z >> _u(31))


def key_hash(key: Hashable) -> int:
    """Stable 64-bit hash of a stream key (tuples of str/int)."""
    digest = hashlib.blake2b(repr(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _u(k)) | (x >> _u(64 - k))


def _count(size: Size) -> int:
    return int(np.prod(size)) if isinstance(size, tuple) else int(size)


class RngStream:
    def __init__(self, master: int, key: Hashable):
        self.master = master & MASK64
        self.key = key
        self.seed = int(splitmix64(self.master ^ key_hash(key), 1)[0])
        state = splitmix64(self.seed, 4 * LANES).reshape(LANES, 4)
        self._s = [state[:, i].copy() for i in range(4)]
        self._u64 = np.empty(0, dtype=np.uint64)
        self._spare_normals = np.empty(0)

    def _advance(self, steps: int) -> np.ndarray:
        out = np.empty((steps, LANES), dtype=np.uint64)
        s0, s1, s2, s3 = self._s
        with np.errstate(over="ignore"):
            for i in range(steps):
                out[i] = _rotl(s1 * _u(5), 7) * _u(9)
                t = s1 << _u(17)
                s2 ^= s0
                s3 ^= s1
                s1 ^= s2
                s0 ^= s3
                s2 ^= t
                s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return out.reshape(-1)

    def next_u64(self, count: int) -> np.ndarray:
        if self._u64.size < count:
            missing = count - self._u64.size
            steps = -(-missing // LANES)
            self._u64 = np.concatenate([self._u64, self._advance(steps)])
        out, self._u64 = self._u64[:count], self._u64[count:]
        return out

    def uniform(self, size: Size = 1) -> np.ndarray:
        """Uniform variates in [0, 1) from the top 53 bits."""
        n = _count(size)
        return ((self.next_u64(n) >> _u(11)).astype(np.float64) * _U53).reshape(size)

    def integers(self, low: int, high: int, size: Size = 1) -> np.ndarray:
        """Integers in [low, high)."""
        span = high - low
        return (np.floor(self.uniform(size) * span).astype(np.int64) + low).reshape(size)

    def bits(self, size: Size) -> np.ndarray:
        return (self.next_u64(_count(size)) >> _u(63)).astype(np.uint8).reshape(size)

    def normal(self, size: Size = 1) -> np.ndarray:
        """Standard normal variates (Marsaglia polar method)."""
        n = _count(size)
        chunks = [self._spare_normals]
        have = self._spare_normals.size
        while have < n:
            pairs = max(64, int((n - have) * 0.64) + 16)
            v = 2.0 * self.uniform(2 * pairs).reshape(pairs, 2) - 1.0
            s = v[:, 0] ** 2 + v[:, 1] ** 2
            ok = (s > 0.0) & (s < 1.0)
            v, s = v[ok], s[ok]
            z = v * np.sqrt(-2.0 * np.log(s) / s)[:, np.newaxis]
            chunks.append(z.reshape(-1))
            have += z.size
        pool = np.concatenate(chunks)
        self._spare_normals = pool[n:]
        return pool[:n].reshape(size)

    def complex_normal(self, size: Size, variance: float = 1.0) -> np.ndarray:
        """Circularly-symmetric complex Gaussian with total variance `variance`."""
        shape = size if isinstance(size, tuple) else (size,)
        z = self.normal(shape + (2,))
        return (z[..., 0] + 1j * z[..., 1]) * np.sqrt(variance / 2.0)

    def phase(self, size: Size) -> np.ndarray:
        """Uniform angles in [-π, π)."""
        return (2.0 * self.uniform(size) - 1.0) * np.pi


def derive_rng(master: int, key: Hashable) -> RngStream:
    """The stream for (master seed, key); same inputs give the same sequence."""
    return RngStream(master, key)

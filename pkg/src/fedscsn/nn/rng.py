"""Platform-independent random streams.

xoshiro256++ seeded through splitmix64. A stream is identified by
``(seed, label)``; the label is hashed into the seed so that named
substreams (``"init/branch0/bottom/3/weight"``, ``"dropout/step/12"``, ...)
are independent of the order in which they are requested.
"""
from __future__ import annotations

import hashlib
import math

import numba
import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def label_hash(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


def seed_state(seed: int, label: str = "") -> np.ndarray:
    key = (seed & _MASK64) ^ label_hash(label)
    state = []
    for _ in range(4):
        key, out = splitmix64(key)
        state.append(out)
    return np.array(state, dtype=np.uint64)


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        s0, s1, s2, s3 = s[0], s[1], s[2], s[3]
        out[i] = _rotl(s0 + s3, 23) + s0
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        s[0], s[1], s[2], s[3] = s0, s1, s2, s3


@numba.njit(cache=True)
def _shuffle(perm, u):
    # Fisher-Yates driven by pre-drawn uniforms in [0, 1)
    n = perm.shape[0]
    for k in range(n - 1):
        i = n - 1 - k
        j = int(u[k] * (i + 1))
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp


def _size(size) -> tuple[int, ...]:
    if size is None:
        return ()
    if isinstance(size, (int, np.integer)):
        return (int(size),)
    return tuple(int(s) for s in size)


class Rng:
    """A labelled xoshiro256++ stream.

    >>> a = Rng(42, "demo").random(3)
    >>> b = Rng(42, "demo").random(3)
    >>> bool((a == b).all())
    True
    """

    def __init__(self, seed: int, label: str = ""):
        self.seed = int(seed)
        self.label = label
        self._state = seed_state(self.seed, label)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, label={self.label!r})"

    def substream(self, name: str) -> "Rng":
        """Independent stream derived from this stream's identity, not its position."""
        label = f"{self.label}/{name}" if self.label else str(name)
        return Rng(self.seed, label)

    def next_u64(self, size=None) -> np.ndarray:
        shape = _size(size)
        out = np.empty(math.prod(shape), dtype=np.uint64)
        _fill_u64(self._state, out)
        return out.reshape(shape)

    def random(self, size=None) -> np.ndarray:
        """Uniform float64 in [0, 1) with 53 random bits."""
        bits = self.next_u64(size) >> np.uint64(11)
        return bits.astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return low + (high - low) * self.random(size)

    def normal(self, size=None) -> np.ndarray:
        """Standard normal draws via Box-Muller (both branches used)."""
        shape = _size(size)
        n = math.prod(shape)
        m = (n + 1) // 2
        u = self.random(2 * m)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        theta = 2.0 * np.pi * u[m:]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def integers(self, high: int, size=None) -> np.ndarray:
        """Integers in ``[0, high)``."""
        if high < 1:
            raise ValueError(f"high must be >= 1, got {high}")
        out = np.floor(self.random(size) * high).astype(np.int64)
        return np.minimum(out, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n, dtype=np.int64)
        if n > 1:
            _shuffle(perm, self.random(n - 1))
        return perm


def reference_xoshiro(state: list[int], count: int) -> list[int]:
    """Pure-Python xoshiro256++; used to cross-check the compiled kernel."""
    s = [int(v) & _MASK64 for v in state]

    def rotl(x, k):
        return ((x << k) | (x >> (64 - k))) & _MASK64

    out = []
    for _ in range(count):
        out.append((rotl((s[0] + s[3]) & _MASK64, 23) + s[0]) & _MASK64)
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out

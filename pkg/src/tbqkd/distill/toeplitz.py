"""Toeplitz hashing for privacy amplification and key verification.

The privacy-amplification matrix is (I_m | T) with T an m x (n-m) Toeplitz
matrix, T[i, j] = seed[m - 1 - i + j].  Read off the seed: the first column,
bottom to top, is seed[0..m) and the first row, left to right, is
seed[m-1..n-1); the two share the corner seed[m-1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

TAG_BITS = 64


def _bits(x, name: str) -> np.ndarray:
    b = np.asarray(x, dtype=np.uint8)
    if b.ndim != 1:
        raise ValueError(f"{name} must be a 1-D bit array")
    return b & 1


@dataclass(frozen=True)
class ToeplitzSpec:
    n: int
    m: int
    seed_bits: np.ndarray

    def __post_init__(self):
        if not 0 < self.m <= self.n:
            raise ValueError(f"need 0 < m <= n, got m={self.m}, n={self.n}")
        seed = _bits(self.seed_bits, "seed")
        if seed.size != self.n - 1:
            raise ValueError(f"seed has {seed.size} bits, expected {self.n - 1}")
        object.__setattr__(self, "seed_bits", seed)

    @classmethod
    def random(cls, n: int, m: int, rng: np.random.Generator) -> "ToeplitzSpec":
        return cls(n, m, rng.integers(0, 2, max(n - 1, 0), dtype=np.uint8))

    def matrix(self) -> np.ndarray:
        """Dense (I_m | T); for tests and small sizes."""
        n, m = self.n, self.m
        i = np.arange(m)[:, None]
        j = np.arange(n - m)[None, :]
        T = self.seed_bits[m - 1 - i + j] if n > m else np.zeros((m, 0), np.uint8)
        return np.hstack([np.eye(m, dtype=np.uint8), T])


def _gf2_correlate(seed: np.ndarray, x: np.ndarray, m: int) -> np.ndarray:
    """y[i] = sum_j seed[m - 1 - i + j] x[j] mod 2 for i < m."""
    L = x.size
    if L == 0 or m == 0:
        return np.zeros(m, np.uint8)
    if L * m <= 1 << 16:
        c = np.convolve(seed.astype(np.int64), x[::-1].astype(np.int64))
    else:
        # exact: every partial sum is an integer below 2^53
        c = np.rint(fftconvolve(seed.astype(float), x[::-1].astype(float))).astype(np.int64)
    n2 = m + L - 2
    return (c[n2 - np.arange(m)] & 1).astype(np.uint8)


def toeplitz_hash(key, spec: ToeplitzSpec) -> np.ndarray:
    k = _bits(key, "key")
    if k.size != spec.n:
        raise ValueError(f"key has {k.size} bits, expected {spec.n}")
    m = spec.m
    return k[:m] ^ _gf2_correlate(spec.seed_bits, k[m:], m)


def tag_seed_bits(tag_seed, n: int) -> np.ndarray:
    """n + 63 seed bits for the tag family, expanded from an integer seed
    (or taken verbatim from a bit array)."""
    need = n + TAG_BITS - 1
    if isinstance(tag_seed, (int, np.integer)):
        return np.random.default_rng([int(tag_seed), n]).integers(0, 2, need, dtype=np.uint8)
    bits = _bits(tag_seed, "tag seed")
    if bits.size < need:
        raise ValueError(f"tag seed has {bits.size} bits, need {need}")
    return bits[:need]


def verify_tag(key, tag_seed) -> int:
    """64-bit tag t = T key for a full 64 x n Toeplitz matrix T drawn from the seed.

    For differing keys the tags collide with probability 2^-64 over seeds.
    The empty key has tag 0.
    """
    k = _bits(key, "key")
    if k.size == 0:
        return 0
    seed = tag_seed_bits(tag_seed, k.size)
    # T[i, j] = seed[TAG_BITS - 1 - i + j], same layout as the PA matrix
    bits = _gf2_correlate(seed, k, TAG_BITS)
    return int.from_bytes(np.packbits(bits).tobytes(), "big")

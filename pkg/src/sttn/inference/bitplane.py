"""Ternary data as two bit planes packed into 64-bit words.

For a ternary vector x of logical length L, bit ``i`` of the stream is
element ``i``; the stream is cut into little-endian 64-bit words, so element
``i`` lives in word ``i // 64`` at bit ``i % 64``. ``mask`` has a 1 where
x != 0 and ``sign`` has a 1 where x > 0. Sign bits under a zero mask and all
tail bits past L are 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64


def words_for(length: int) -> int:
    return -(-length // WORD_BITS)


@dataclass(frozen=True)
class BitplaneTensor:
    mask: np.ndarray
    sign: np.ndarray
    length: int

    @property
    def words(self) -> int:
        return self.mask.shape[-1]

    def nonzeros(self) -> np.ndarray:
        return np.bitwise_count(self.mask).sum(axis=-1)


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    length = bits.shape[-1]
    nbytes = words_for(length) * 8
    packed = np.packbits(bits, axis=-1, bitorder="little")
    if packed.shape[-1] != nbytes:
        pad = [(0, 0)] * (packed.ndim - 1) + [(0, nbytes - packed.shape[-1])]
        packed = np.pad(packed, pad)
    return np.ascontiguousarray(packed).view("<u8")


def check_ternary(x: np.ndarray) -> None:
    bad = (x != 0) & (x != 1) & (x != -1)
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise ValueError(f"entry {x[tuple(idx)]!r} at {tuple(idx)} is not in {{-1, 0, +1}}")


def pack(x: np.ndarray) -> BitplaneTensor:
    """Pack ternary values along the last axis."""
    x = np.asarray(x)
    check_ternary(x)
    return BitplaneTensor(_pack_bits(x != 0), _pack_bits(x > 0), x.shape[-1])


def decode(bp: BitplaneTensor) -> np.ndarray:
    """Inverse of :func:`pack`, returning int8 values."""
    def bits(words):
        raw = np.ascontiguousarray(words).view(np.uint8)
        return np.unpackbits(raw, axis=-1, bitorder="little")[..., :bp.length]

    m = bits(bp.mask).astype(np.int8)
    s = bits(bp.sign).astype(np.int8)
    return m * (2 * s - 1)


def ternary_dot(a: BitplaneTensor, b: BitplaneTensor) -> int:
    """Exact integer inner product of two packed ternary vectors.

    Both nonzero -> the product is +1 when signs agree and -1 otherwise, so
    sum = agreements - disagreements = 2*popcount(m & ~(sa ^ sb)) - popcount(m).
    """
    if a.length != b.length:
        raise ValueError(f"length mismatch: {a.length} vs {b.length}")
    m = a.mask & b.mask
    agree = m & ~(a.sign ^ b.sign)
    return int(2 * np.bitwise_count(agree).sum(dtype=np.int64) - np.bitwise_count(m).sum(dtype=np.int64))

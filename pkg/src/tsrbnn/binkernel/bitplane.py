"""Bit planes: +-1 values packed into little-endian 64-bit words.

Bit ``i`` of word ``w`` holds element ``64 * w + i``; +1 is encoded as 1 and
-1 as 0. Padding bits past the logical length are always zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64


def n_words(length: int) -> int:
    return (length + WORD_BITS - 1) // WORD_BITS


def tail_mask(length: int) -> np.uint64:
    """Mask selecting the valid bits of the final word."""
    r = length % WORD_BITS
    return np.uint64(0xFFFFFFFFFFFFFFFF) if r == 0 else np.uint64((1 << r) - 1)


@dataclass(frozen=True, eq=False)
class BitPlane:
    """Packed rows of ``length`` bits; ``words`` has shape ``(..., n_words(length))``."""

    words: np.ndarray
    length: int

    def __post_init__(self):
        if self.words.dtype != np.uint64 or self.words.shape[-1] != n_words(self.length):
            raise ValueError(
                f"{self.length} bits need {n_words(self.length)} uint64 words per row, "
                f"got {self.words.dtype} {self.words.shape}"
            )

    @property
    def rows(self) -> int:
        return int(np.prod(self.words.shape[:-1], dtype=np.int64))

    def __eq__(self, other):
        return (isinstance(other, BitPlane) and self.length == other.length
                and np.array_equal(self.words, other.words))

    def padding_is_zero(self) -> bool:
        if self.length % WORD_BITS == 0 or self.words.size == 0:
            return True
        return not np.any(self.words[..., -1] & ~tail_mask(self.length))


def pack_bits(bits: np.ndarray) -> BitPlane:
    """Pack a boolean array along its last axis (True = +1)."""
    bits = np.asarray(bits, dtype=bool)
    length = bits.shape[-1]
    packed = np.packbits(bits, axis=-1, bitorder="little")
    nbytes = n_words(length) * 8
    if packed.shape[-1] != nbytes:
        pad = [(0, 0)] * (packed.ndim - 1) + [(0, nbytes - packed.shape[-1])]
        packed = np.pad(packed, pad)
    words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)
    return BitPlane(words, length)


def pack(values: np.ndarray) -> BitPlane:
    """Pack a +-1 array along its last axis; any other value is rejected."""
    values = np.asarray(values)
    bad = (values != 1) & (values != -1)
    if bad.any():
        where = tuple(int(i) for i in np.unravel_index(int(np.argmax(bad)), values.shape))
        raise ValueError(
            f"pack expects only +-1 values; found {values[where].item()!r} at index {where}")
    return pack_bits(values > 0)


def unpack_bits(plane: BitPlane) -> np.ndarray:
    raw = plane.words.astype("<u8", copy=False).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little", count=plane.length)
    return bits.astype(bool)


def unpack(plane: BitPlane, dtype=np.float32) -> np.ndarray:
    return np.where(unpack_bits(plane), 1, -1).astype(dtype)


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


def xnor_dot(a: BitPlane, b: BitPlane) -> int:
    """+-1 dot product of two single-row planes: ``n - 2 * popcount(a XOR b)``."""
    if a.length != b.length:
        raise ValueError(f"length mismatch: {a.length} vs {b.length}")
    if a.words.ndim != 1 or b.words.ndim != 1:
        raise ValueError("xnor_dot takes single-row planes")
    if a.length == 0:
        return 0
    diff = a.words ^ b.words
    diff[-1] &= tail_mask(a.length)
    return a.length - 2 * int(popcount(diff).sum())

"""Compiled XNOR-popcount matrix kernels."""

from __future__ import annotations

import numpy as np
from numba import njit

from .bitplane import BitPlane, tail_mask

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


@njit(cache=True, inline="always")
def _popcount64(x):
    # SWAR form; LLVM lowers it to the hardware popcount where available
    x = x - ((x >> np.uint64(1)) & _M1)
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    return (x * _H01) >> np.uint64(56)


@njit(cache=True, nogil=True)
def _xnor_gemm(a, b, length, last_mask):
    m_rows, n_w = a.shape
    n_rows = b.shape[0]
    out = np.empty((m_rows, n_rows), dtype=np.int32)
    full = n_w - 1
    for i in range(m_rows):
        for j in range(n_rows):
            acc = np.uint64(0)
            for k in range(full):
                acc += _popcount64(a[i, k] ^ b[j, k])
            acc += _popcount64((a[i, full] ^ b[j, full]) & last_mask)
            out[i, j] = length - 2 * np.int64(acc)
    return out


def xnor_gemm(a: BitPlane, b: BitPlane) -> np.ndarray:
    """``out[i, j] = sum_k a[i, k] * b[j, k]`` over +-1 rows, as int32.

    ``a`` has shape ``(M, W)`` and ``b`` ``(N, W)``; both hold rows of the same
    logical length. The final word is masked, so padding content is irrelevant.
    """
    if a.length != b.length:
        raise ValueError(f"row length mismatch: {a.length} vs {b.length}")
    aw = np.ascontiguousarray(a.words.reshape(-1, a.words.shape[-1]))
    bw = np.ascontiguousarray(b.words.reshape(-1, b.words.shape[-1]))
    if a.length == 0:
        return np.zeros((aw.shape[0], bw.shape[0]), dtype=np.int32)
    return _xnor_gemm(aw, bw, np.int64(a.length), tail_mask(a.length))


def xnor_gemm_numpy(a: BitPlane, b: BitPlane) -> np.ndarray:
    """Broadcasting reference of :func:`xnor_gemm` (memory-hungry; for checks)."""
    diff = a.words[:, None, :] ^ b.words[None, :, :]
    diff[..., -1] &= tail_mask(a.length)
    return (a.length - 2 * np.bitwise_count(diff).sum(axis=-1, dtype=np.int64)).astype(np.int32)

"""Compiled inner loops for packed ternary GEMM and a loop-only float reference."""
from __future__ import annotations

import numpy as np
from numba import njit, types
from numba.extending import intrinsic


@intrinsic
def _popcount64(typingctx, x):
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        return builder.ctpop(args[0])

    return sig, codegen


@njit(cache=True, nogil=True)
def packed_gemm(a_mask, a_sign, b_mask, b_sign):
    """out[i, j] = sum_k a[i, k] * b[j, k] for packed ternary rows; int64 result."""
    m, words = a_mask.shape
    n = b_mask.shape[0]
    out = np.empty((m, n), dtype=np.int64)
    for i in range(m):
        for j in range(n):
            agree = 0
            total = 0
            for w in range(words):
                both = a_mask[i, w] & b_mask[j, w]
                total += _popcount64(both)
                agree += _popcount64(both & ~(a_sign[i, w] ^ b_sign[j, w]))
            out[i, j] = 2 * agree - total
    return out


@njit(cache=True, nogil=True)
def naive_float_gemm(a, b):
    """float32 out[i, j] = sum_k a[i, k] * b[j, k] with straightforward loops (no BLAS)."""
    m, k = a.shape
    n = b.shape[0]
    out = np.empty((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for p in range(k):
                acc += a[i, p] * b[j, p]
            out[i, j] = acc
    return out


def warmup() -> None:
    z = np.zeros((1, 1), dtype=np.uint64)
    packed_gemm(z, z, z, z)
    f = np.zeros((1, 1), dtype=np.float32)
    naive_float_gemm(f, f)

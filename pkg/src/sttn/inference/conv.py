"""Packed ternary convolution and inner product."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..autograd.ops import im2col
from .bitplane import check_ternary, pack
from .fuse import PackedKernel, TernaryKernel
from .kernels import packed_gemm


class TernaryConvResult(NamedTuple):
    acc: np.ndarray  # exact integer accumulators
    out: np.ndarray  # float32 scale * acc


def _as_packed(kernel) -> PackedKernel:
    return kernel if isinstance(kernel, PackedKernel) else PackedKernel.from_kernel(kernel)


def ternary_conv2d(x: np.ndarray, kernel: TernaryKernel | PackedKernel, stride: int = 1,
                   pad: int = 0) -> TernaryConvResult:
    """Convolve ternary activations (N, C, H, W) or (C, H, W) with a ternary kernel.

    Each output position becomes one packed im2col row; padding is zeros and
    therefore carries mask bit 0.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    kernel = _as_packed(kernel)
    o, c, kh, kw = kernel.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"input {x.shape} does not match kernel {kernel.shape}")
    check_ternary(x)
    n = x.shape[0]
    rows = im2col(x.astype(np.int8), kh, kw, stride, pad)
    ho = (x.shape[2] + 2 * pad - kh) // stride + 1
    wo = (x.shape[3] + 2 * pad - kw) // stride + 1
    planes = pack(rows)
    acc = packed_gemm(planes.mask, planes.sign, kernel.planes.mask, kernel.planes.sign)
    acc = np.ascontiguousarray(acc.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    out = np.float32(kernel.scale) * acc.astype(np.float32)
    if squeeze:
        acc, out = acc[0], out[0]
    return TernaryConvResult(acc, out)


def ternary_linear(x: np.ndarray, kernel: TernaryKernel | PackedKernel) -> TernaryConvResult:
    """Inner product of ternary rows (N, in) with a ternary (out, in) kernel."""
    x = np.asarray(x)
    kernel = _as_packed(kernel)
    if x.ndim != 2 or x.shape[1] != kernel.planes.length:
        raise ValueError(f"input {x.shape} does not match kernel {kernel.shape}")
    check_ternary(x)
    planes = pack(x.astype(np.int8))
    acc = packed_gemm(planes.mask, planes.sign, kernel.planes.mask, kernel.planes.sign)
    return TernaryConvResult(acc, np.float32(kernel.scale) * acc.astype(np.float32))

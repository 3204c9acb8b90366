from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..quantizers import LatentKernelPair, sign
from .bitplane import BitplaneTensor, pack


@dataclass(frozen=True)
class TernaryKernel:
    """Inference kernel: ``scale * t`` with t in {-1, 0, +1}."""

    t: np.ndarray
    scale: float

    @property
    def sparsity(self) -> float:
        return float((self.t == 0).mean())

    def dense(self) -> np.ndarray:
        return (np.float32(self.scale) * self.t).astype(np.float32)

    def packed(self) -> "PackedKernel":
        return PackedKernel.from_kernel(self)


@dataclass(frozen=True)
class PackedKernel:
    """Per-filter bit planes of a ternary kernel; row ``o`` is filter ``o`` flattened (c, kh, kw)."""

    planes: BitplaneTensor
    shape: tuple[int, ...]
    scale: float

    @classmethod
    def from_kernel(cls, kernel: TernaryKernel) -> "PackedKernel":
        t = kernel.t
        return cls(pack(t.reshape(t.shape[0], -1)), tuple(t.shape), float(kernel.scale))


def fuse_signs(b1: np.ndarray, b2: np.ndarray, alpha: float) -> TernaryKernel:
    t = ((b1.astype(np.int8) + b2.astype(np.int8)) // 2).astype(np.int8)
    return TernaryKernel(t, 2.0 * float(alpha))


def fuse(pair: LatentKernelPair) -> TernaryKernel:
    """Add the two binarized kernels: agreeing signs keep their sign, opposite signs give 0."""
    if not pair.is_current():
        pair.refresh()
    return fuse_signs(sign(pair.w1), sign(pair.w2), pair.alpha)

"""Fusion of trained kernel pairs and bit-packed ternary execution."""
from .bitplane import BitplaneTensor, decode, pack, ternary_dot, words_for
from .conv import TernaryConvResult, ternary_conv2d, ternary_linear
from .fuse import PackedKernel, TernaryKernel, fuse, fuse_signs

__all__ = [
    "BitplaneTensor", "PackedKernel", "TernaryConvResult", "TernaryKernel", "decode", "fuse", "fuse_signs",
    "pack", "ternary_conv2d", "ternary_dot", "ternary_linear", "words_for",
]

"""Soft-threshold ternary networks: training, fusion and bit-packed inference."""

__version__ = "0.1.0"

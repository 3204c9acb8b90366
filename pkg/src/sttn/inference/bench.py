"""Single-threaded throughput of the packed ternary GEMM against float GEMMs."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bitplane import pack
from .kernels import naive_float_gemm, packed_gemm, warmup

DEFAULT_SIZES = ((256, 2304, 196), (64, 576, 1024), (1, 1, 1))
PATHS = ("packed", "naive_float", "blas_float")


@dataclass
class BenchRow:
    m: int
    k: int
    n: int
    path: str
    median_s: float
    gmacs: float
    spread: float  # (max - min) / median over repeats
    speedup_vs_naive: float


def _time(fn, repeats: int) -> list[float]:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


def bench_kernels(sizes=DEFAULT_SIZES, repeats: int = 7, seed: int = 0) -> list[BenchRow]:
    """Time each path ``repeats`` times per (M, K, N) and report medians.

    ``naive_float`` is the same loop nest as the packed kernel with float32
    multiply-adds; ``blas_float`` is numpy's matmul, included for context.
    """
    from threadpoolctl import threadpool_limits

    warmup()
    rng = np.random.default_rng(seed)
    rows: list[BenchRow] = []
    with threadpool_limits(1):
        for m, k, n in sizes:
            a = rng.integers(-1, 2, size=(m, k)).astype(np.int8)
            b = rng.integers(-1, 2, size=(n, k)).astype(np.int8)
            pa, pb = pack(a), pack(b)
            af, bf = a.astype(np.float32), b.astype(np.float32)
            fns = {
                "packed": lambda: packed_gemm(pa.mask, pa.sign, pb.mask, pb.sign),
                "naive_float": lambda: naive_float_gemm(af, bf),
                "blas_float": lambda: af @ bf.T,
            }
            medians = {}
            for path in PATHS:
                times = _time(fns[path], repeats)
                med = float(np.median(times))
                medians[path] = med
                rows.append(BenchRow(m, k, n, path, med, m * k * n / med / 1e9,
                                     (max(times) - min(times)) / med, 0.0))
            for row in rows[-len(PATHS):]:
                row.speedup_vs_naive = medians["naive_float"] / row.median_s
    return rows


def write_csv(rows: list[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(asdict(rows[0]).keys()))
        w.writeheader()
        for row in rows:
            w.writerow(asdict(row))

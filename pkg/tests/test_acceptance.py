"""Acceptance suite: one PASS/FAIL/SKIP line per criterion.

The lines are printed as the tests run (visible with ``-s``) and repeated in
an "acceptance criteria" section of the pytest terminal summary.

Training criteria need datasets under ``data/`` (or ``$STTN_DATA``):
``data/mnist`` holds the four MNIST IDX files (``scripts/fetch_mnist.py``
downloads them) and ``data/cifar10`` the CIFAR-10 binary batches. Training
runs are kept in ``runs/acceptance`` (or ``$STTN_ACCEPTANCE_RUNS``) together
with a ``summary.json``; a later session reuses a run only when its recorded
configuration is identical. Set ``STTN_ACCEPTANCE_RETRAIN=1`` to force
retraining. The CIFAR-10 criterion is a multi-hour run and additionally
requires ``STTN_LONG=1``.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from sttn.autograd import Tensor, no_record, ops
from sttn.inference import TernaryKernel, decode, pack, ternary_conv2d, ternary_dot
from sttn.inference.bench import bench_kernels
from sttn.models import build_block
from sttn.quantizers import (
    LatentKernelPair,
    optimal_ternary_oracle,
    sttn_backward_pair,
    sttn_objective,
    sttn_quantize_pair,
    ternarize,
    ternary_objective,
    twn_quantize,
)
from sttn.training import RunConfig, load_checkpoint, save_checkpoint, train

from conftest import REPO, data_dir
from helpers import acceptance_line, away_from, central_diff, random_geometry, random_ternary, rel_err
from oracles import enumerate_best_ternary, grid_objective, naive_int_conv, ste_surrogate_loss

pytestmark = pytest.mark.acceptance


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# -- 1..5: exact properties ---------------------------------------------------------

def test_c01_gradient_matches_finite_differences():
    rng = np.random.default_rng(101)

    def run():
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 129))
            w1 = away_from(rng.uniform(-1.5, 1.5, n), (0.0, 1.0), 1e-3, rng)
            w2 = away_from(rng.uniform(-1.5, 1.5, n), (0.0, 1.0), 1e-3, rng)
            g1, g2 = rng.normal(size=n), rng.normal(size=n)
            d1, d2 = sttn_backward_pair(g1, g2, LatentKernelPair(w1, w2))
            num = central_diff(ste_surrogate_loss(w1, w2, g1, g2), np.concatenate([w1, w2]))
            worst = max(worst, rel_err(np.concatenate([d1, d2]), num))
        return worst

    worst, secs = timed(run)
    ok = worst < 1e-5 and secs < 60
    acceptance_line(1, ok, f"100 pairs, worst rel. err {worst:.2e} (< 1e-5), {secs:.1f}s (< 60s)")
    assert ok


def test_c02_scale_is_grid_optimal():
    rng = np.random.default_rng(102)

    def run():
        worst = -np.inf
        for _ in range(1000):
            n = int(rng.integers(1, 129))
            pair = LatentKernelPair(rng.normal(size=n), rng.normal(size=n))
            _, alpha = sttn_quantize_pair(pair)
            top = 2 * max(np.abs(pair.w1).max(), np.abs(pair.w2).max())
            j = grid_objective(pair.w1, pair.w2, np.linspace(0, top, 200))
            # the closed form must do at least as well as the best grid point
            worst = max(worst, sttn_objective(pair, alpha) - j.min())
        return worst

    worst, secs = timed(run)
    ok = worst <= 1e-12 and secs < 60
    acceptance_line(2, ok, f"1000 pairs, max J(alpha) - min_grid J = {worst:.2e} (<= 0), {secs:.1f}s (< 60s)")
    assert ok


def test_c03_oracle_is_exact():
    rng = np.random.default_rng(103)

    def run():
        worst = 0.0
        for _ in range(500):
            w = rng.normal(size=int(rng.integers(1, 13)))
            _, _, best = enumerate_best_ternary(w)
            worst = max(worst, abs(optimal_ternary_oracle(w).objective - best) / max(best, 1e-300))
        dominated = 0
        for _ in range(200):
            w = rng.normal(size=int(rng.integers(1, 4097))) * rng.uniform(0.01, 10)
            if rng.random() < 0.3:
                w = rng.standard_t(2, size=w.size)  # heavy tails, where the heuristic is weakest
            h = ternary_objective(w, twn_quantize(w, "heuristic").t)
            dominated += optimal_ternary_oracle(w).objective >= h * (1 - 1e-12)
        return worst, dominated

    (worst, dominated), secs = timed(run)
    ok = worst < 1e-12 and dominated == 200 and secs < 120
    acceptance_line(3, ok, f"500 enumerations (N<=12) worst rel. gap {worst:.1e}; oracle >= heuristic on "
                           f"{dominated}/200 kernels (N<=4096); {secs:.1f}s (< 120s)")
    assert ok


def test_c04_fused_block_matches_two_branch_graph():
    rng = np.random.default_rng(104)

    def run():
        worst, exact = 0.0, True
        for _ in range(20):
            c, h, w, o, k, s, p = random_geometry(rng)
            blk = build_block(c, o, k, k, s, p, "sttn_2_2", rng=rng).eval()
            blk.bn.running_mean[...] = rng.normal(0, 0.3, c)
            blk.bn.running_var[...] = rng.uniform(0.5, 2, c)
            x = rng.standard_normal((2, c, h, w)).astype(np.float32)
            with no_record():
                ref = blk(Tensor(x)).data
                hq = ternarize(ops.batch_norm(Tensor(x), blk.bn.gamma, blk.bn.beta, blk.bn.running_mean,
                                              blk.bn.running_var, False).data)
            kernel = blk.ternary_kernel()
            res = ternary_conv2d(hq, kernel.packed(), s, p)
            worst = max(worst, float(np.max(np.abs(np.maximum(res.out, 0) - ref))))
            for i in range(2):
                exact &= bool(np.array_equal(res.acc[i], naive_int_conv(hq[i].astype(np.int8), kernel.t, s, p)))
        return worst, exact

    (worst, exact), secs = timed(run)
    ok = worst < 1e-5 and exact and secs < 60
    acceptance_line(4, ok, f"20 geometries, max |two-branch - fused| {worst:.1e} (< 1e-5), integer "
                           f"accumulators {'equal' if exact else 'DIFFER from'} naive oracle, {secs:.1f}s")
    assert ok


def test_c05_bitplane_integrity():
    rng = np.random.default_rng(105)

    def run():
        roundtrip = sum(
            bool(np.array_equal(decode(pack(x)), x))
            for x in (random_ternary(rng, int(rng.integers(1, 258))) for _ in range(1000))
        )
        dots = 0
        for _ in range(10000):
            n = int(rng.integers(1, 258))
            a, b = random_ternary(rng, n), random_ternary(rng, n)
            dots += ternary_dot(pack(a), pack(b)) == int(a.astype(np.int64) @ b)
        return roundtrip, dots

    (roundtrip, dots), secs = timed(run)
    ok = roundtrip == 1000 and dots == 10000 and secs < 30
    acceptance_line(5, ok, f"round-trip {roundtrip}/1000, dot {dots}/10000, {secs:.1f}s (< 30s)")
    assert ok


# -- 6, 8, 10: desk-scale MNIST runs ---------------------------------------------------

RUNS = Path(os.environ.get("STTN_ACCEPTANCE_RUNS", REPO / "runs" / "acceptance"))
DESK_RUNS = {"float": 10, "sttn_2_2": 20}


def run_or_reuse(mode: str, epochs: int, dataset: Path, kind: str = "mnist_idx", arch: str = "lenet_t") -> dict:
    """Train (single-threaded) or reuse an identical earlier run; returns its summary."""
    out = RUNS / f"{arch}_{mode}"
    cfg = RunConfig(arch, mode, kind, dataset.resolve(), epochs=epochs, threads=1, output_dir=out)
    summary_path = out / "summary.json"
    if summary_path.exists() and not os.environ.get("STTN_ACCEPTANCE_RETRAIN"):
        summary = json.loads(summary_path.read_text())
        if summary["config"] == cfg.to_dict() and (out / "best.ckpt").exists():
            summary["reused"] = True
            return summary
    res = train(cfg)
    summary = {
        "config": cfg.to_dict(), "seconds": res.seconds, "epochs": len(res.metrics),
        "final_test_acc": res.metrics[-1].test_acc, "best_test_acc": res.best_test_acc,
        "final_checkpoint": str(out / "final.ckpt"), "finished": time.strftime("%Y-%m-%d %H:%M:%S"),
    }
    save_checkpoint(out / "final.ckpt", res.model, {"run": cfg.to_dict(), "epoch": epochs})
    summary_path.write_text(json.dumps(summary, indent=1))
    summary["reused"] = False
    return summary


@pytest.fixture(scope="module")
def desk_runs():
    mnist = data_dir("mnist")
    if not mnist.exists():
        acceptance_line(6, None, f"MNIST not found at {mnist} (run scripts/fetch_mnist.py)")
        pytest.skip("MNIST not available")
    return {mode: run_or_reuse(mode, epochs, mnist) for mode, epochs in DESK_RUNS.items()}


@pytest.mark.slow
def test_c06_desk_scale_training(desk_runs):
    fl, st = desk_runs["float"], desk_runs["sttn_2_2"]
    total = fl["seconds"] + st["seconds"]
    gap = 100 * (fl["final_test_acc"] - st["final_test_acc"])
    ok_float = fl["final_test_acc"] >= 0.985
    ok_gap = gap <= 2.0
    ok_time = total < 30 * 60
    reused = " (reused recorded runs)" if fl["reused"] and st["reused"] else ""
    acceptance_line(
        6, ok_float and ok_gap and ok_time,
        f"lenet_t float {100 * fl['final_test_acc']:.2f}% after 10 epochs (>= 98.5); sttn_2_2 "
        f"{100 * st['final_test_acc']:.2f}% after 20 epochs, gap {gap:.2f} pts (<= 2.0); "
        f"train time {fl['seconds'] / 60:.1f} + {st['seconds'] / 60:.1f} = {total / 60:.1f} min (< 30){reused}",
    )
    assert ok_float and ok_gap and ok_time


@pytest.mark.slow
def test_c08_approximation_error_direction(desk_runs):
    """Report only: one seed cannot establish the ordering's stability across seeds."""
    from sttn.analysis import analyze

    model, _ = load_checkpoint(desk_runs["sttn_2_2"]["final_checkpoint"])
    twin, _ = load_checkpoint(desk_runs["float"]["final_checkpoint"])
    report = analyze(model, twin)
    err_sttn = report.totals["err_sttn"]
    err_twn = report.totals["err_twn_heuristic_ref"]
    acceptance_line(
        8, err_sttn < err_twn,
        f"[report only, single seed] sum ||W - 2aT||^2 over quantized layers = {err_sttn:.2f} vs "
        f"hard-threshold heuristic on float twin = {err_twn:.2f} (own-weights heuristic "
        f"{report.totals['err_twn_heuristic']:.2f}, oracle {report.totals['err_twn_oracle']:.2f})",
    )
    assert np.isfinite(err_sttn) and np.isfinite(err_twn)


@pytest.mark.slow
def test_c10_sparsity_report(desk_runs, tmp_path, capsys):
    from sttn.cli import main

    ckpt = desk_runs["sttn_2_2"]["final_checkpoint"]
    assert main(["analyze", "--checkpoint", ckpt, "--out", str(tmp_path / "report")]) == 0
    out = capsys.readouterr().out
    report = json.loads((tmp_path / "report.json").read_text())
    sp = report["trend"]["sparsity"]
    ok = len(sp) == len(report["layers"]) > 0 and all(f"q{i}: sparsity=" in out for i in range(len(sp)))
    with capsys.disabled():
        acceptance_line(10, ok, "per-layer sparsity " + ", ".join(f"{v:.3f}" for v in sp)
                        + f"; early-to-late decrease (reported, not asserted): first-last "
                          f"{report['trend']['first_minus_last']:+.3f}, non-increasing={report['trend']['non_increasing']}")
    assert ok


# -- 7: long CIFAR-10 run ---------------------------------------------------------------

@pytest.mark.slow
def test_c07_ternary_near_float_cifar():
    cifar = data_dir("cifar10")
    if not cifar.exists():
        acceptance_line(7, None, f"CIFAR-10 not found at {cifar}; long test not run")
        pytest.skip("CIFAR-10 not available")
    if not os.environ.get("STTN_LONG"):
        acceptance_line(7, None, "CIFAR-10 present but STTN_LONG is not set; multi-hour test not run")
        pytest.skip("set STTN_LONG=1 for the CIFAR-10 run")
    runs = {mode: run_or_reuse(mode, 60, cifar, "cifar10_bin", "vgg7_t") for mode in ("float", "sttn_2_2")}
    err = {m: 100 * (1 - r["final_test_acc"]) for m, r in runs.items()}
    secs = sum(r["seconds"] for r in runs.values())
    gap = err["sttn_2_2"] - err["float"]
    ok = gap <= 3.0 and secs < 4 * 3600
    acceptance_line(7, ok, f"vgg7_t error float {err['float']:.2f}% vs sttn_2_2 {err['sttn_2_2']:.2f}% "
                           f"(gap {gap:.2f} <= 3.0), {secs / 3600:.2f} h (< 4)")
    assert ok


# -- 9: kernel throughput -------------------------------------------------------------

@pytest.mark.slow
def test_c09_packed_kernel_throughput():
    size = (256, 2304, 196)
    runs = [bench_kernels([size], repeats=7, seed=s) for s in range(3)]
    med = {path: [next(r.median_s for r in rows if r.path == path) for rows in runs]
           for path in ("packed", "naive_float", "blas_float")}
    speedup = float(np.median(med["naive_float"]) / np.median(med["packed"]))
    variation = {p: (max(v) - min(v)) / float(np.median(v)) for p, v in med.items() if p != "blas_float"}
    blas = float(np.median(med["blas_float"]) / np.median(med["packed"]))
    ok = speedup >= 4 and max(variation.values()) < 0.10
    acceptance_line(9, ok, f"256x2304x196 packed {1e3 * np.median(med['packed']):.2f} ms vs naive float "
                           f"{1e3 * np.median(med['naive_float']):.1f} ms: x{speedup:.1f} (>= 4); median variation "
                           f"over 3 runs packed {100 * variation['packed']:.1f}%, naive "
                           f"{100 * variation['naive_float']:.1f}% (< 10%); BLAS float is x{blas:.2f} of packed time")
    assert ok

"""Per-layer weight reports: sparsity, approximation errors, destination histograms.

Everything here is a pure function of the checkpoint(s) passed in.

For a soft-threshold layer the full-precision weight being approximated is
``W = w1 + w2`` and its ternary approximation is ``2*alpha*T`` (that is,
``alpha*b1 + alpha*b2``), so the reported STTN error is ``||W - 2*alpha*T||^2``.
The hard-threshold numbers are computed on a float reference network's
weights when one is given (matching layers by position), and on ``W`` itself
otherwise; the exact oracle gives the smallest error any ternary
approximation of the same weights can reach.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .layers import QuantBlock
from .models import Network
from .quantizers import approx_error, optimal_ternary_oracle, twn_quantize

HIST_BINS = 64
LAYER_FIELDS = (
    "layer", "mode", "shape", "n", "sparsity", "err_sttn", "err_twn_heuristic", "err_twn_oracle",
    "err_twn_heuristic_ref", "err_twn_oracle_ref",
)


@dataclass
class Histogram:
    edges: list[float]
    counts: list[int]
    to_neg: list[int]
    to_zero: list[int]
    to_pos: list[int]


@dataclass
class LayerReport:
    layer: str
    mode: str
    shape: list[int]
    n: int
    sparsity: float
    err_sttn: float | None
    err_twn_heuristic: float
    err_twn_oracle: float
    err_twn_heuristic_ref: float | None = None
    err_twn_oracle_ref: float | None = None
    histogram: Histogram | None = None


@dataclass
class AnalysisReport:
    layers: list[LayerReport]
    totals: dict = field(default_factory=dict)
    trend: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"layers": [asdict(layer) for layer in self.layers], "totals": self.totals, "trend": self.trend}


def destination_histogram(w: np.ndarray, t: np.ndarray, bins: int = HIST_BINS) -> Histogram:
    """Histogram of ``w`` over [min, max] with per-bin counts of where each element is quantized to."""
    w = np.asarray(w, dtype=np.float64).ravel()
    t = np.asarray(t).ravel()
    lo, hi = float(w.min()), float(w.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, w, side="right") - 1, 0, bins - 1)
    per = {v: np.bincount(idx[t == v], minlength=bins) for v in (-1, 0, 1)}
    counts = per[-1] + per[0] + per[1]
    return Histogram(edges.tolist(), counts.tolist(), per[-1].tolist(), per[0].tolist(), per[1].tolist())


def analyze_block(block: QuantBlock, reference: QuantBlock | None = None, bins: int = HIST_BINS) -> LayerReport:
    w = block.effective_weight()
    heur = twn_quantize(w, "heuristic")
    oracle = optimal_ternary_oracle(w)
    if block.quantized:
        kernel = block.ternary_kernel()
        t = kernel.t
        err_sttn = approx_error(w, kernel.scale, t) if block.is_pair else None
    else:
        t, err_sttn = heur.t, None
    rep = LayerReport(
        layer=block.name, mode=block.mode, shape=list(w.shape), n=int(w.size),
        sparsity=float((t == 0).mean()), err_sttn=err_sttn,
        err_twn_heuristic=approx_error(w, heur.alpha, heur.t),
        err_twn_oracle=float((w ** 2).sum() - oracle.objective),
        histogram=destination_histogram(w, t, bins),
    )
    if reference is not None:
        ref_w = reference.effective_weight()
        if ref_w.shape != w.shape:
            raise ValueError(f"reference layer {reference.name} has shape {ref_w.shape}, expected {w.shape}")
        rh = twn_quantize(ref_w, "heuristic")
        rep.err_twn_heuristic_ref = approx_error(ref_w, rh.alpha, rh.t)
        rep.err_twn_oracle_ref = float((ref_w ** 2).sum() - optimal_ternary_oracle(ref_w).objective)
    return rep


def analyze(model: Network, reference: Network | None = None, bins: int = HIST_BINS) -> AnalysisReport:
    blocks = model.quant_blocks()
    refs = reference.quant_blocks() if reference is not None else [None] * len(blocks)
    if len(refs) != len(blocks):
        raise ValueError(f"reference has {len(refs)} quantized layers, model has {len(blocks)}")
    layers = [analyze_block(b, r, bins) for b, r in zip(blocks, refs)]

    def total(key):
        vals = [getattr(layer, key) for layer in layers]
        return None if any(v is None for v in vals) else float(sum(vals))

    totals = {k: total(k) for k in ("err_sttn", "err_twn_heuristic", "err_twn_oracle",
                                    "err_twn_heuristic_ref", "err_twn_oracle_ref")}
    sp = [layer.sparsity for layer in layers]
    trend = {
        "sparsity": sp,
        "first_minus_last": float(sp[0] - sp[-1]) if sp else None,
        "non_increasing": bool(all(a >= b for a, b in zip(sp, sp[1:]))),
        "slope": float(np.polyfit(np.arange(len(sp)), sp, 1)[0]) if len(sp) > 1 else None,
    }
    return AnalysisReport(layers, totals, trend)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return "x".join(str(i) for i in v)
    return "" if v is None else v


def write_report(report: AnalysisReport, out: str | Path) -> dict[str, Path]:
    """Write ``<out>.json``, ``<out>_layers.csv`` and ``<out>_hist.csv``."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out.with_name(out.name + ".json"),
        "layers": out.with_name(out.name + "_layers.csv"),
        "hist": out.with_name(out.name + "_hist.csv"),
    }
    paths["json"].write_text(json.dumps(report.to_dict(), indent=1))
    with open(paths["layers"], "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LAYER_FIELDS)
        for layer in report.layers:
            writer.writerow([_fmt(getattr(layer, k)) for k in LAYER_FIELDS])
    with open(paths["hist"], "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("layer", "bin", "lo", "hi", "count", "to_neg", "to_zero", "to_pos"))
        for layer in report.layers:
            h = layer.histogram
            for i in range(len(h.counts)):
                writer.writerow((layer.layer, i, repr(h.edges[i]), repr(h.edges[i + 1]),
                                 h.counts[i], h.to_neg[i], h.to_zero[i], h.to_pos[i]))
    return paths

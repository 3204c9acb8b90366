"""Brute-force references, deliberately independent of the package code paths."""
import itertools
from functools import lru_cache

import numpy as np


def sgn(x):
    return np.where(x >= 0, 1.0, -1.0)


@lru_cache(maxsize=16)
def ternary_patterns(n: int) -> np.ndarray:
    """All 3^n ternary vectors as a float64 (3^n, n) matrix."""
    return np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=n)))


def enumerate_best_ternary(w: np.ndarray):
    """Max over every ternary pattern t of (w.t)^2/(t.t) with alpha = max(0, w.t/t.t)."""
    w = np.asarray(w, dtype=np.float64).ravel()
    pats = ternary_patterns(w.size)
    proj = pats @ w
    nz = (pats != 0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.where((nz > 0) & (proj > 0), proj ** 2 / np.maximum(nz, 1), 0.0)
    best = int(np.argmax(score))
    alpha = proj[best] / nz[best] if nz[best] else 0.0
    return pats[best], max(alpha, 0.0), float(score[best])


def min_error_by_enumeration(w: np.ndarray) -> float:
    """Smallest ||w - alpha t||^2 over all ternary t with the per-pattern optimal alpha >= 0."""
    _, _, score = enumerate_best_ternary(w)
    return float((np.asarray(w, dtype=np.float64) ** 2).sum() - score)


def grid_objective(w1, w2, alphas):
    """J(alpha) for each alpha on a grid, binary codes fixed to sign(w)."""
    w1, w2 = np.asarray(w1, np.float64).ravel(), np.asarray(w2, np.float64).ravel()
    b1, b2 = sgn(w1), sgn(w2)
    a = np.asarray(alphas)[:, None]
    return ((w1 - a * b1) ** 2).sum(axis=1) + ((w2 - a * b2) ** 2).sum(axis=1)


def ste_surrogate_loss(w1_0, w2_0, g1, g2):
    """Scalar loss sum_k g_k . alpha(w) s_k(w) with sign frozen to its STE linearization.

    s(w) = sign(w0) + (w - w0) * 1{|w0| <= 1}: it takes the sign's value at the
    expansion point and the clipped-identity slope, so finite differences of
    this map reproduce scale-coupling plus straight-through gradients.
    """
    s1, s2 = sgn(w1_0), sgn(w2_0)
    m1, m2 = np.abs(w1_0) <= 1, np.abs(w2_0) <= 1
    n = w1_0.size

    def loss(w_flat):
        w1 = w_flat[:n].reshape(w1_0.shape)
        w2 = w_flat[n:].reshape(w2_0.shape)
        alpha = (np.abs(w1).sum() + np.abs(w2).sum()) / (2 * n)
        q1 = alpha * (s1 + (w1 - w1_0) * m1)
        q2 = alpha * (s2 + (w2 - w2_0) * m2)
        return float((g1 * q1).sum() + (g2 * q2).sum())

    return loss


def naive_int_conv(x: np.ndarray, k: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Integer cross-correlation with explicit loops; x (C,H,W), k (O,C,kh,kw)."""
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x.astype(np.int64), ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo), dtype=np.int64)
    for f in range(o):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[f, i, j] = int((patch * k[f]).sum())
    return out

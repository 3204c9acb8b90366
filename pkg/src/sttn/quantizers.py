"""Weight and activation quantizers.

Soft-threshold ternarization keeps two latent float kernels ``w1``/``w2``
per layer. Each is binarized with ``sign`` and both share one scale, so the
sum ``alpha*b1 + alpha*b2`` only takes the values {-2a, 0, +2a}. The hard
threshold baseline (TWN) and an exact ternary-approximation oracle live here
too, so the analysis code can compare all three on the same weights.

``sign(0)`` is +1 everywhere in this package.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autograd import Function, Tensor

BACKWARD_MODES = ("consistent", "paper_literal")
ACTIVATION_THRESHOLD = 0.5
STE_CLIP = 1.0


class QuantizationError(ValueError):
    pass


class StaleScaleError(QuantizationError):
    """The shared scale no longer matches the latent kernels it was computed from."""


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1, in the dtype of ``x``."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.dtype(np.int8)
    return np.where(x >= 0, dtype.type(1), dtype.type(-1))


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise QuantizationError("non-finite entries in kernel")


def shared_scale(w1: np.ndarray, w2: np.ndarray) -> float:
    """Closed-form optimum of ||w1 - a*sign(w1)||^2 + ||w2 - a*sign(w2)||^2 over a >= 0."""
    n = w1.size
    return float((np.abs(w1, dtype=np.float64).sum() + np.abs(w2, dtype=np.float64).sum()) / (2 * n))


@dataclass
class LatentKernelPair:
    w1: np.ndarray
    w2: np.ndarray
    alpha: float | None = None

    def __post_init__(self):
        self.w1 = np.asarray(self.w1)
        self.w2 = np.asarray(self.w2)
        if self.w1.shape != self.w2.shape:
            raise QuantizationError(f"latent kernels differ in shape: {self.w1.shape} vs {self.w2.shape}")
        if self.w1.size == 0:
            raise QuantizationError("empty kernels")
        if self.alpha is None:
            self.refresh()

    @property
    def N(self) -> int:  # noqa: N802 - element count per kernel
        return self.w1.size

    def refresh(self) -> float:
        _check_finite(self.w1, self.w2)
        self.alpha = shared_scale(self.w1, self.w2)
        return self.alpha

    def is_current(self) -> bool:
        return self.alpha is not None and np.isclose(self.alpha, shared_scale(self.w1, self.w2), rtol=1e-12, atol=0)


@dataclass(frozen=True)
class BinaryView:
    b1: np.ndarray
    b2: np.ndarray
    alpha: float

    @property
    def q1(self) -> np.ndarray:
        return (self.alpha * self.b1).astype(self.b1.dtype)

    @property
    def q2(self) -> np.ndarray:
        return (self.alpha * self.b2).astype(self.b2.dtype)


def sttn_quantize_pair(pair: LatentKernelPair) -> tuple[BinaryView, float]:
    """Refresh the shared scale and binarize both latent kernels."""
    alpha = pair.refresh()
    return BinaryView(sign(pair.w1), sign(pair.w2), alpha), alpha


def sttn_objective(pair: LatentKernelPair, alpha: float) -> float:
    """J(alpha) with b1 = sign(w1), b2 = sign(w2)."""
    w1 = pair.w1.astype(np.float64)
    w2 = pair.w2.astype(np.float64)
    return float(((w1 - alpha * sign(w1)) ** 2).sum() + ((w2 - alpha * sign(w2)) ** 2).sum())


def sttn_backward_pair(g1: np.ndarray, g2: np.ndarray, pair: LatentKernelPair,
                       mode: str = "consistent") -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the loss w.r.t. the latent kernels, given gradients w.r.t. ``alpha*sign(w)``.

    The first term differentiates the shared scale, which depends on every
    element of both kernels. The second is the clipped straight-through term
    for ``sign``. ``mode="consistent"`` applies it only to the element's own
    upstream gradient; ``mode="paper_literal"`` multiplies it by the sum of all
    upstream gradients of both kernels, as the formula is printed.
    """
    if mode not in BACKWARD_MODES:
        raise QuantizationError(f"unknown backward mode {mode!r}; expected one of {BACKWARD_MODES}")
    g1 = np.asarray(g1)
    g2 = np.asarray(g2)
    if g1.shape != pair.w1.shape or g2.shape != pair.w2.shape:
        raise QuantizationError(f"gradient shapes {g1.shape}/{g2.shape} do not match kernels {pair.w1.shape}")
    if not pair.is_current():
        raise StaleScaleError("alpha is stale: latent kernels changed since the forward pass")
    s1, s2 = sign(pair.w1), sign(pair.w2)
    alpha = pair.alpha
    coupled = (np.dot(g1.ravel(), s1.ravel()) + np.dot(g2.ravel(), s2.ravel())) / (2 * pair.N)
    pass1 = np.abs(pair.w1) <= STE_CLIP
    pass2 = np.abs(pair.w2) <= STE_CLIP
    if mode == "consistent":
        d1 = coupled * s1 + alpha * pass1 * g1
        d2 = coupled * s2 + alpha * pass2 * g2
    else:
        total = g1.sum() + g2.sum()
        d1 = coupled * s1 + alpha * pass1 * total
        d2 = coupled * s2 + alpha * pass2 * total
    return d1.astype(g1.dtype), d2.astype(g2.dtype)


class _SttnWeights(Function):
    @staticmethod
    def forward(ctx, w1, w2, mode="consistent"):
        pair = LatentKernelPair(w1, w2)
        view, _ = sttn_quantize_pair(pair)
        ctx.pair, ctx.mode = pair, mode
        return view.q1, view.q2

    @staticmethod
    def backward(ctx, g1, g2):
        return sttn_backward_pair(g1, g2, ctx.pair, ctx.mode)


def sttn_weights(w1: Tensor, w2: Tensor, mode: str = "consistent") -> tuple[Tensor, Tensor]:
    """Differentiable ``(alpha*sign(w1), alpha*sign(w2))`` with the shared-scale backward."""
    if mode not in BACKWARD_MODES:
        raise QuantizationError(f"unknown backward mode {mode!r}")
    return _SttnWeights.apply(w1, w2, mode=mode)


# -- activations -----------------------------------------------------------------

def ternarize(x: np.ndarray, threshold: float = ACTIVATION_THRESHOLD) -> np.ndarray:
    """sign(x) where |x| > threshold, else 0 (strict inequality)."""
    x = np.asarray(x)
    return (np.sign(x) * (np.abs(x) > threshold)).astype(x.dtype)


class _TernarizeActivation(Function):
    @staticmethod
    def forward(ctx, x):
        if not np.all(np.isfinite(x)):
            raise QuantizationError("non-finite activation")
        ctx.passthrough = np.abs(x) <= STE_CLIP
        return ternarize(x)

    @staticmethod
    def backward(ctx, g):
        return g * ctx.passthrough


def ternarize_activation(x: Tensor) -> Tensor:
    """Ternary activation with a clipped straight-through gradient."""
    return _TernarizeActivation.apply(x)


# -- hard-threshold baseline -------------------------------------------------------

@dataclass(frozen=True)
class TwnResult:
    t: np.ndarray
    alpha: float
    delta: float


def ternary_objective(w: np.ndarray, t: np.ndarray) -> float:
    """(w.t)^2 / (t.t): how much of ||w||^2 the best scaled ``t`` explains (0 for t = 0)."""
    w = np.asarray(w, dtype=np.float64).ravel()
    t = np.asarray(t, dtype=np.float64).ravel()
    nz = float(t @ t)
    if nz == 0:
        return 0.0
    proj = float(w @ t)
    return proj * proj / nz if proj > 0 else 0.0


def _threshold(w: np.ndarray, delta: float) -> TwnResult:
    t = np.where(w > delta, 1, np.where(w < -delta, -1, 0)).astype(np.int8)
    chosen = np.abs(w[t != 0]).astype(np.float64)
    alpha = float(chosen.mean()) if chosen.size else 0.0
    return TwnResult(t, alpha, float(delta))


def twn_quantize(w: np.ndarray, mode: str = "heuristic") -> TwnResult:
    """Hard-threshold ternarization.

    ``heuristic`` uses delta = 0.7 * mean|w|. ``exact`` picks the threshold
    maximizing (sum_{|w|>delta} |w|)^2 / |{|w|>delta}| over every cut between
    consecutive distinct magnitudes and reports the midpoint of that cut.
    """
    w = np.asarray(w)
    if w.size == 0:
        raise QuantizationError("empty kernel")
    if mode == "heuristic":
        return _threshold(w, 0.7 * float(np.abs(w, dtype=np.float64).mean()))
    if mode != "exact":
        raise QuantizationError(f"unknown TWN mode {mode!r}")
    mags = np.sort(np.abs(w.astype(np.float64)).ravel())[::-1]
    below = np.append(mags[1:], 0.0)
    valid = mags > below  # a threshold strictly between the k-th and (k+1)-th magnitude exists
    if not valid.any():
        return _threshold(w, 0.0)
    k = np.arange(1, mags.size + 1)
    score = np.where(valid, np.cumsum(mags) ** 2 / k, -np.inf)
    best = int(np.argmax(score))
    return _threshold(w, 0.5 * (mags[best] + below[best]))


class OracleResult(NamedTuple):
    t: np.ndarray
    alpha: float
    objective: float
    k: int


def optimal_ternary_oracle(w: np.ndarray) -> OracleResult:
    """Exact minimizer of ||w - alpha*t||^2 over alpha >= 0 and ternary t.

    For a fixed support size k the best support is the k largest magnitudes,
    so sorting once and scanning prefix sums gives the global optimum in
    O(N log N). Ties in magnitude go to the lower index.
    """
    w = np.asarray(w)
    if w.size == 0:
        raise QuantizationError("empty kernel")
    flat = w.astype(np.float64).ravel()
    order = np.argsort(-np.abs(flat), kind="stable")
    prefix = np.cumsum(np.abs(flat)[order])
    t = np.zeros(flat.size, dtype=np.int8)
    if prefix[-1] == 0:
        return OracleResult(t.reshape(w.shape), 0.0, 0.0, 0)
    k = np.arange(1, flat.size + 1)
    score = prefix ** 2 / k
    best = int(np.argmax(score))
    top = order[:best + 1]
    t[top] = sign(flat[top])
    return OracleResult(t.reshape(w.shape), float(prefix[best] / (best + 1)), float(score[best]), best + 1)


def approx_error(w: np.ndarray, alpha: float, t: np.ndarray) -> float:
    """Squared L2 distance ||w - alpha*t||^2."""
    w = np.asarray(w, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if w.shape != t.shape:
        raise QuantizationError(f"shape mismatch: {w.shape} vs {t.shape}")
    return float(((w - alpha * t) ** 2).sum())


class _TwnWeights(Function):
    @staticmethod
    def forward(ctx, w):
        res = twn_quantize(w, "heuristic")
        return (res.alpha * res.t).astype(w.dtype)

    @staticmethod
    def backward(ctx, g):
        return g


def twn_weights(w: Tensor) -> Tensor:
    """TWN-quantized view of ``w`` with an identity straight-through gradient."""
    return _TwnWeights.apply(w)

"""Adam with decoupled weight decay, and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..autograd import Parameter


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimState:
    base_lr: float = 0.005
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(state: OptimState, params: list[Parameter], grads: list[np.ndarray], lr: float) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is decoupled (``p -= lr * wd * p``) and only touches
    parameters flagged ``decay``. If any gradient is non-finite nothing is
    modified, not even the step counter.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.name or ''} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {p.name or p.id} of shape {p.shape}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g in zip(params, grads):
        m = state.m.get(p.id)
        if m is None:
            m = state.m[p.id] = np.zeros_like(p.data)
            state.v[p.id] = np.zeros_like(p.data)
        v = state.v[p.id]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if getattr(p, "decay", False) and state.weight_decay:
            p.data -= np.asarray(lr * state.weight_decay, p.dtype) * p.data
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * update).astype(p.dtype)


def cosine_lr(base_lr: float, epoch: float, total_epochs: int) -> float:
    if total_epochs <= 0:
        return base_lr
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs))

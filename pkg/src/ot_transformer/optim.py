"""Adam, global-norm gradient clipping and cosine learning-rate decay."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params],
                   0, beta1, beta2, eps)


def adam_step(params: Sequence[Tensor], state: OptimState, lr: float,
              weight_decay: dict[int, float] | None = None) -> None:
    """One bias-corrected Adam update in place; gradients are cleared afterwards.

    ``weight_decay`` maps a parameter index to a decoupled decay factor
    (used only for the optional output-layer decay).
    """
    for i, p in enumerate(params):
        if p.grad is None:
            raise RuntimeError(f"parameter {i} ({p.name}) has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, p in enumerate(params):
        g = p.grad
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay and i in weight_decay:
            p.data -= lr * weight_decay[i] * p.data
        p.grad = None


def global_grad_norm(params: Sequence[Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients by min(1, max_norm / ||g||_2); returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return norm


def lr_schedule(it: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from lr_max at it=0 to lr_min at it=total."""
    if total <= 0:
        return lr_max
    frac = min(max(it / total, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))

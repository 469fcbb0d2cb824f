"""Central finite-difference checker for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_tape


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: tuple[int, int, int] | None  # (param index, row, col)
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` must rebuild its scalar output from the current ``params`` data on
    every call. Entries are perturbed in place and restored. With
    ``max_entries`` set, a random subset of each parameter is checked.
    """
    if not 0.0 < h <= 1e-3:
        raise ValueError(f"step h must lie in (0, 1e-3], got {h}")
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = fn()
    backward(tape, out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst_err, worst_at, count = 0.0, None, 0
    for pi, p in enumerate(params):
        coords = list(np.ndindex(p.data.shape))
        if max_entries is not None and len(coords) > max_entries:
            pick = (rng or np.random.default_rng(0)).choice(len(coords), max_entries, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for ij in coords:
            orig = p.data[ij]
            with no_tape():
                p.data[ij] = orig + h
                fp = fn().item()
                p.data[ij] = orig - h
                fm = fn().item()
            p.data[ij] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = relative_error(float(analytic[pi][ij]), numeric, floor)
            count += 1
            if err > worst_err or worst_at is None:
                worst_err, worst_at = err, (pi, *ij)
    for p in params:
        p.grad = None
    return GradCheckReport(worst_err, worst_at, count, tol)

"""Exact p-Wasserstein distances between equal-size, equal-weight point clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist


@dataclass
class EmpiricalMeasure:
    """N points in R^q, each carrying mass 1/N."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError(f"expected an N x q point array with N >= 1, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("empirical measure has non-finite points")
        self.points = pts

    @property
    def N(self) -> int:
        return self.points.shape[0]


def _check_pair(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> None:
    if mu.N != nu.N:
        raise ValueError(f"measures must have equal size, got {mu.N} and {nu.N}")
    if mu.points.shape[1] != nu.points.shape[1]:
        raise ValueError("measures live in different dimensions")


def wasserstein_p(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: int = 2) -> float:
    """W_p with Euclidean ground metric via an exact assignment.

    For uniform measures of equal size an optimal coupling is a permutation,
    so W_p^p = min_sigma (1/N) sum_i ||x_i - x'_sigma(i)||_2^p.
    """
    _check_pair(mu, nu)
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    cost = cdist(mu.points, nu.points) ** p
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / mu.N) ** (1.0 / p)


def wasserstein_1d_sorted(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: int = 2) -> float:
    """Monotone (sorted) coupling; optimal for 1-D measures."""
    _check_pair(mu, nu)
    if mu.points.shape[1] != 1:
        raise ValueError("sorted coupling only applies to 1-D measures")
    a = np.sort(mu.points[:, 0])
    b = np.sort(nu.points[:, 0])
    return float(np.mean(np.abs(a - b) ** p)) ** (1.0 / p)

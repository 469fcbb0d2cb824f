"""Optimal-control ground truth for the regularized flow.

At the optimum every hidden state moves with the constant velocity
-(1/lam) grad G(X(T), y), so the terminal state solves the fixed-point
equation X(T) = X(0) - (T/lam) grad G(X(T), y). This module solves that
equation, samples the straight optimal trajectory, and checks the
output-stability and Wasserstein pushforward bounds it implies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .flow import FlowTrace
from .tensor import Tensor
from .transformer import TerminalLossSpec, analytic_loss_grad
from .wasserstein import EmpiricalMeasure, wasserstein_p

__all__ = [
    "TerminalLossSpec",
    "ConditionViolation",
    "OracleNonConvergence",
    "OracleSolution",
    "certified_constant",
    "solve_terminal",
    "solve_terminal_newton",
    "optimal_trajectory",
    "StabilityReport",
    "check_stability_bound",
    "PushforwardReport",
    "check_pushforward_stability",
]


class ConditionViolation(ValueError):
    """lam <= T L^2: the fixed-point map is not guaranteed to contract."""


class OracleNonConvergence(ArithmeticError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"fixed point not reached after {iterations} iterations "
                         f"(residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


@dataclass
class OracleSolution:
    X_T: np.ndarray
    velocity: np.ndarray  # -(1/lam) grad G(X_T, y), constant in time
    residual: float
    iterations: int = 0
    method: str = "iteration"
    residual_history: list[float] = field(default_factory=list)


def certified_constant(spec: TerminalLossSpec, T: float, lam: float) -> float:
    """(1 - T L^2 / lam)^-1."""
    return 1.0 / (1.0 - T * spec.L**2 / lam)


def _require_condition(spec: TerminalLossSpec, T: float, lam: float) -> None:
    if not lam > T * spec.L**2:
        raise ConditionViolation(
            f"need lambda > T L^2, got lambda={lam:g}, T={T:g}, L^2={spec.L**2:.6g}"
        )


def _phi(Z: np.ndarray, X0: np.ndarray, y, spec: TerminalLossSpec, T: float, lam: float) -> np.ndarray:
    return X0 - (T / lam) * analytic_loss_grad(spec, Z, y)


def _finish(Z, X0, y, spec, T, lam, iters, method, history) -> OracleSolution:
    g = analytic_loss_grad(spec, Z, y)
    res = float(np.linalg.norm(Z - (X0 - (T / lam) * g)))
    return OracleSolution(Z, -g / lam, res, iters, method, history)


def solve_terminal(X0, y, spec: TerminalLossSpec, T: float, lam: float, tol: float = 1e-12,
                   max_iters: int = 10_000) -> OracleSolution:
    """Terminal state of the optimal flow started at X0 with target y.

    MSE heads are linear, so the fixed point is returned from one linear
    solve. Softmax heads use plain fixed-point iteration (a contraction with
    factor T L^2 / lam), falling back to damped Newton if it stalls.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    _require_condition(spec, T, lam)
    X0 = np.asarray(X0, dtype=np.float64)
    if X0.ndim == 1:
        X0 = X0[:, None]
    r = T / lam
    if spec.kind == "mse":
        psi = spec.psi_o
        A = np.eye(psi.shape[1]) + r * (psi.T @ psi)
        if spec.per_token:
            Y = np.asarray(y, dtype=np.float64).reshape(psi.shape[0], -1)
            Z = np.linalg.solve(A, X0 + r * (psi.T @ Y))
        else:
            x0 = X0.reshape(-1, 1, order="F")
            yv = np.asarray(y, dtype=np.float64).reshape(-1, 1)
            Z = np.linalg.solve(A, x0 + r * (psi.T @ yv)).reshape(X0.shape, order="F")
        sol = _finish(Z, X0, y, spec, T, lam, 1, "closed_form", [])
        if sol.residual > max(tol, 1e-12 * (1.0 + np.linalg.norm(X0))):
            raise OracleNonConvergence(sol.residual, 1)
        return sol

    Z = X0.copy()
    history = []
    for it in range(1, max_iters + 1):
        nxt = _phi(Z, X0, y, spec, T, lam)
        res = float(np.linalg.norm(nxt - Z))
        history.append(res)
        Z = nxt
        if res <= tol:
            sol = _finish(Z, X0, y, spec, T, lam, it, "iteration", history)
            if sol.residual <= tol:
                return sol
        if it > 50 and history[-1] >= history[-50]:
            break  # stalled at round-off, hand over to Newton
    return solve_terminal_newton(X0, y, spec, T, lam, tol, start=Z)


def _hessian(spec: TerminalLossSpec, X: np.ndarray, y) -> np.ndarray:
    """Hessian of G in the flattened coordinates used by ``spec``."""
    psi = spec.psi_o
    if spec.kind == "mse":
        blocks = [psi.T @ psi]
        count = X.shape[1] if spec.per_token else 1
        return np.kron(np.eye(count), blocks[0])
    Z = psi @ spec._flat(X)
    Y = np.asarray(y, dtype=np.float64).reshape(Z.shape, order="F")
    e = np.exp(Z - Z.max(axis=0, keepdims=True))
    S = e / e.sum(axis=0, keepdims=True)
    mats = []
    for j in range(Z.shape[1]):
        s = S[:, j]
        mats.append(Y[:, j].sum() * psi.T @ (np.diag(s) - np.outer(s, s)) @ psi)
    if not spec.per_token:
        return mats[0]
    out = np.zeros((X.size, X.size))
    d = X.shape[0]
    for j, m in enumerate(mats):
        out[j * d:(j + 1) * d, j * d:(j + 1) * d] = m
    return out


def solve_terminal_newton(X0, y, spec: TerminalLossSpec, T: float, lam: float, tol: float = 1e-12,
                          max_iters: int = 200, start: np.ndarray | None = None) -> OracleSolution:
    """Damped Newton on F(Z) = Z - X0 + (T/lam) grad G(Z, y) = 0.

    Independent of the fixed-point iteration; used as a cross-check and as
    the fallback solver.
    """
    _require_condition(spec, T, lam)
    X0 = np.asarray(X0, dtype=np.float64)
    if X0.ndim == 1:
        X0 = X0[:, None]
    r = T / lam
    shape = X0.shape

    def F(Z):
        return Z - X0 + r * analytic_loss_grad(spec, Z, y)

    def flat(A):
        return A.reshape(-1, 1, order="F")

    Z = X0.copy() if start is None else np.array(start, dtype=np.float64)
    res = float(np.linalg.norm(F(Z)))
    history = [res]
    for it in range(1, max_iters + 1):
        if res <= tol:
            return _finish(Z, X0, y, spec, T, lam, it - 1, "newton", history)
        J = np.eye(Z.size) + r * _hessian(spec, Z, y)
        step = np.linalg.solve(J, flat(F(Z))).reshape(shape, order="F")
        t = 1.0
        while True:
            cand = Z - t * step
            cres = float(np.linalg.norm(F(cand)))
            if cres < res or t < 1e-8:
                break
            t *= 0.5
        if cres >= res:
            break
        Z, res = cand, cres
        history.append(res)
    if res <= tol:
        return _finish(Z, X0, y, spec, T, lam, max_iters, "newton", history)
    raise OracleNonConvergence(res, max_iters)


def optimal_trajectory(sol: OracleSolution, T: float, num_samples: int = 16) -> FlowTrace:
    """Sample X(t) = X(T) - (T - t) * velocity on a uniform grid of num_samples steps.

    Velocities in the returned trace are finite differences of the samples,
    so straightness is measured rather than assumed.
    """
    if num_samples < 1:
        raise ValueError("need at least one step")
    dt = T / num_samples
    times = [i * dt for i in range(num_samples)] + [T]
    states = [sol.X_T - (T - t) * sol.velocity for t in times]
    states[-1] = sol.X_T.copy()
    vels = [(states[i + 1] - states[i]) / dt for i in range(num_samples)]
    cost = 0.5 * dt * sum(float(np.sum(v * v)) for v in vels)
    return FlowTrace([Tensor(s) for s in states], [Tensor(v) for v in vels], Tensor(cost), dt, times)


@dataclass
class StabilityReport:
    n_pairs: int
    violations: int
    max_slack: float  # max over pairs of lhs - rhs (<= 0 when the bound holds)
    constant: float
    tightness_counts: list[int]  # histogram of lhs/rhs over [0, 1] in 10 bins
    tol: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


def stability_sides(X01, y1, X02, y2, spec: TerminalLossSpec, T: float, lam: float) -> tuple[float, float]:
    s1 = solve_terminal(X01, y1, spec, T, lam)
    s2 = solve_terminal(X02, y2, spec, T, lam)
    out1, out2 = spec.head(s1.X_T), spec.head(s2.X_T)
    lhs = float(np.linalg.norm(out1 - out2))
    L = spec.L
    ratio = T * L**2 / lam
    dx = float(np.linalg.norm(np.asarray(X01, float) - np.asarray(X02, float)))
    dy = float(np.linalg.norm(np.asarray(y1, float) - np.asarray(y2, float)))
    rhs = (L * dx + ratio * dy) / (1.0 - ratio)
    return lhs, rhs


def check_stability_bound(pairs: Sequence, spec: TerminalLossSpec, T: float, lam: float,
                          tol: float = 1e-9) -> StabilityReport:
    """Check ||out_1 - out_2|| <= (1 - TL^2/lam)^-1 (L ||dX(0)||_F + (TL^2/lam) ||dy||).

    ``pairs`` holds ``((X0_1, y_1), (X0_2, y_2))`` items; outputs come from
    the oracle terminal states.
    """
    _require_condition(spec, T, lam)
    slacks, ratios = [], []
    for (x1, y1), (x2, y2) in pairs:
        lhs, rhs = stability_sides(x1, y1, x2, y2, spec, T, lam)
        slacks.append(lhs - rhs)
        ratios.append(lhs / rhs if rhs > 0 else 0.0)
    slacks_arr = np.asarray(slacks)
    counts, _ = np.histogram(np.clip(ratios, 0.0, 1.0), bins=10, range=(0.0, 1.0))
    return StabilityReport(
        n_pairs=len(slacks),
        violations=int(np.sum(slacks_arr > tol)),
        max_slack=float(slacks_arr.max()) if slacks else 0.0,
        constant=certified_constant(spec, T, lam),
        tightness_counts=[int(c) for c in counts],
        tol=tol,
    )


@dataclass
class PushforwardReport:
    w_in: float
    w_out: float
    ratio: float
    budget: float
    satisfied: bool


def check_pushforward_stability(mapping: Callable[[np.ndarray], np.ndarray], mu: EmpiricalMeasure,
                                nu: EmpiricalMeasure, lipschitz_budget: float, p: int = 2,
                                enforce: bool = True, tol: float = 1e-9) -> PushforwardReport:
    """Compare W_p(T#mu, T#nu) with budget * W_p(mu, nu).

    ``mapping`` sends one point to one output vector. With ``enforce`` the
    report's ``satisfied`` flag is the bound; otherwise the ratio is only
    diagnostic and ``satisfied`` is always True.
    """
    w_in = wasserstein_p(mu, nu, p)
    out_mu = EmpiricalMeasure(np.stack([np.ravel(mapping(x)) for x in mu.points]))
    out_nu = EmpiricalMeasure(np.stack([np.ravel(mapping(x)) for x in nu.points]))
    w_out = wasserstein_p(out_mu, out_nu, p)
    ratio = 0.0 if w_in == 0.0 and w_out == 0.0 else (w_out / w_in if w_in > 0 else np.inf)
    ok = w_out <= lipschitz_budget * w_in + tol if enforce else True
    return PushforwardReport(w_in, w_out, float(ratio), lipschitz_budget, bool(ok))


def oracle_map(spec: TerminalLossSpec, y, T: float, lam: float, shape: tuple[int, int] | None = None):
    """x -> head(X_T(x)) for a fixed target, x being vec(X(0))."""

    def mapping(x: np.ndarray) -> np.ndarray:
        X0 = np.asarray(x, dtype=np.float64)
        X0 = X0.reshape(shape, order="F") if shape is not None else X0.reshape(-1, 1)
        return spec.head(solve_terminal(X0, y, spec, T, lam).X_T)

    return mapping


def autodiff_loss_grad(spec: TerminalLossSpec, X_T: np.ndarray, y) -> np.ndarray:
    """Gradient of G through the tape (reference for the closed forms)."""
    X = Tensor(np.asarray(X_T, dtype=np.float64), requires_grad=True)
    psi = Tensor(spec.psi_o)
    with tc.Tape() as tape:
        Z = psi @ (X if spec.per_token else tc.vec(X))
        Y = np.asarray(y, dtype=np.float64).reshape(Z.shape, order="F")
        if spec.kind == "mse":
            G = tc.mse(Z, Y)
        else:
            G = tc.scale(tc.cross_entropy(Z, Y), Z.cols)
    tc.backward(tape, G)
    return X.grad

import numpy as np
import pytest
from scipy.optimize import minimize

from ot_transformer import tensor as tc
from ot_transformer.flow import straightness_metrics
from ot_transformer.oracle import (ConditionViolation, certified_constant, check_pushforward_stability,
                                   check_stability_bound, optimal_trajectory, oracle_map, solve_terminal,
                                   solve_terminal_newton, stability_sides)
from ot_transformer.tensor import Tape, Tensor
from ot_transformer.transformer import TerminalLossSpec
from ot_transformer.wasserstein import EmpiricalMeasure


def _spec(kind, c=3, width=4, seed=0, scale=0.5):
    psi = np.random.default_rng(seed).standard_normal((c, width)) * scale
    return TerminalLossSpec(kind, psi)


def test_scalar_closed_form():
    sol = solve_terminal(np.array([[1.0]]), np.array([[4.0]]), TerminalLossSpec("mse", np.eye(1)), 1.0, 2.0)
    assert abs(sol.X_T[0, 0] - 2.0) < 1e-12
    assert sol.velocity[0, 0] == pytest.approx(1.0)
    m = straightness_metrics(optimal_trajectory(sol, 1.0))
    assert m.velocity_dispersion < 1e-10 and m.chord_deviation < 1e-10


def test_condition_is_enforced():
    spec = TerminalLossSpec("mse", 2.0 * np.eye(2))
    with pytest.raises(ConditionViolation):
        solve_terminal(np.ones((2, 1)), np.zeros((2, 1)), spec, 1.0, 4.0)
    with pytest.raises(ConditionViolation):
        solve_terminal_newton(np.ones((2, 1)), np.zeros((2, 1)), spec, 1.0, 3.9)
    assert certified_constant(spec, 1.0, 8.0) == pytest.approx(2.0)


@pytest.mark.parametrize("kind", ["mse", "softmax_ce"])
def test_fixed_point_residual_and_newton_agree(kind):
    spec = _spec(kind)
    lam = 2.0 * spec.L**2
    X0 = np.random.default_rng(1).standard_normal((2, 2))
    y = np.array([[0.2], [0.5], [0.3]]) if kind == "softmax_ce" else np.random.default_rng(2).standard_normal((3, 1))
    a = solve_terminal(X0, y, spec, 1.0, lam)
    b = solve_terminal_newton(X0, y, spec, 1.0, lam)
    assert a.residual < 1e-12 and b.residual < 1e-12
    np.testing.assert_allclose(a.X_T, b.X_T, atol=1e-11)


@pytest.mark.parametrize("kind", ["mse", "softmax_ce"])
def test_oracle_matches_direct_control_optimization(kind):
    """Minimize G(X_M) + lam dt/2 sum ||v_m||^2 over free per-step velocities."""
    spec = _spec(kind, c=3, width=2, seed=4)
    T, lam, M = 1.0, 3.0 * spec.L**2, 6
    dt = T / M
    x0 = np.array([[0.7], [-0.4]])
    y = np.array([[0.6], [0.1], [0.3]]) if kind == "softmax_ce" else np.array([[1.0], [-2.0], [0.5]])
    psi = Tensor(spec.psi_o)

    def objective(flat):
        vs = [Tensor(flat[2 * m:2 * m + 2].reshape(2, 1).copy(), requires_grad=True) for m in range(M)]
        with Tape() as tape:
            X = Tensor(x0)
            cost = None
            for v in vs:
                X = X + tc.scale(v, dt)
                sq = tc.frobenius_norm_sq(v)
                cost = sq if cost is None else cost + sq
            Z = psi @ X
            G = tc.mse(Z, y) if kind == "mse" else tc.cross_entropy(Z, y)
            J = G + tc.scale(cost, lam * dt / 2)
        tc.backward(tape, J)
        return J.item(), np.concatenate([v.grad.ravel() for v in vs])

    res = minimize(objective, np.zeros(2 * M), jac=True, method="L-BFGS-B", options={"gtol": 1e-12, "ftol": 1e-15})
    vels = res.x.reshape(M, 2)
    sol = solve_terminal(x0, y, spec, T, lam)
    np.testing.assert_allclose(x0.ravel() + dt * vels.sum(axis=0), sol.X_T.ravel(), atol=1e-6)
    np.testing.assert_allclose(vels, np.tile(sol.velocity.ravel(), (M, 1)), atol=1e-5)


@pytest.mark.parametrize("kind", ["mse", "softmax_ce"])
def test_stability_bound_holds(kind):
    spec = _spec(kind, c=4, width=8, seed=5)
    lam = 2.0 * spec.L**2
    rng = np.random.default_rng(6)
    pairs = []
    for _ in range(50):
        x1 = rng.standard_normal((4, 2))
        y1 = rng.dirichlet(np.ones(4))[:, None] if kind == "softmax_ce" else rng.standard_normal((4, 1))
        y2 = rng.dirichlet(np.ones(4))[:, None] if kind == "softmax_ce" else rng.standard_normal((4, 1))
        pairs.append(((x1, y1), (x1 + 0.1 * rng.standard_normal((4, 2)), y2)))
    rep = check_stability_bound(pairs, spec, 1.0, lam)
    assert rep.passed and rep.max_slack <= 1e-9
    assert sum(rep.tightness_counts) == 50


def test_stability_sides_zero_for_identical_inputs():
    spec = _spec("mse")
    x = np.ones((2, 2))
    y = np.ones((3, 1))
    lhs, rhs = stability_sides(x, y, x, y, spec, 1.0, 2 * spec.L**2)
    assert lhs == 0.0 and rhs == 0.0


def test_pushforward_with_oracle_map():
    spec = _spec("mse", c=3, width=3, seed=7)
    lam = 2 * spec.L**2
    mapping = oracle_map(spec, np.zeros((3, 1)), 1.0, lam, shape=(3, 1))
    rng = np.random.default_rng(8)
    mu = EmpiricalMeasure(rng.standard_normal((10, 3)))
    nu = EmpiricalMeasure(rng.standard_normal((10, 3)) + 1.0)
    budget = spec.L * certified_constant(spec, 1.0, lam)
    rep = check_pushforward_stability(mapping, mu, nu, budget)
    assert rep.satisfied and rep.ratio <= budget
    tight = check_pushforward_stability(mapping, mu, nu, rep.ratio / 2)
    assert not tight.satisfied
    assert check_pushforward_stability(mapping, mu, nu, rep.ratio / 2, enforce=False).satisfied

"""Self-contained certificate suites for the optimal-control guarantees.

Each suite draws random problems from a fixed seed, runs the oracle and
reports its worst slack (observed minus allowed, so <= tol means pass).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .flow import straightness_metrics
from .oracle import (ConditionViolation, OracleNonConvergence, certified_constant, check_pushforward_stability,
                     check_stability_bound, optimal_trajectory, oracle_map, solve_terminal)
from .rng import RngState
from .transformer import TerminalLossSpec
from .wasserstein import EmpiricalMeasure, wasserstein_1d_sorted, wasserstein_p

SUITES = ("straightness", "stability_mse", "stability_ce", "pushforward", "wasserstein")


@dataclass
class TheoryConfig:
    seed: int = 0
    T: float = 1.0
    lam_factor: float = 2.0  # lam = lam_factor * T * L^2 per problem
    lam: float | None = None  # absolute lambda, overrides lam_factor
    d: int = 4
    n: int = 2
    n_pairs: int = 1000
    n_measure_pairs: int = 200
    n_points: int = 32
    point_dim: int = 4
    n_straight: int = 20
    tol: float = 1e-9
    straight_tol: float = 1e-10
    suites: tuple[str, ...] = SUITES

    def validate(self) -> "TheoryConfig":
        unknown = set(self.suites) - set(SUITES)
        if unknown:
            raise ValueError(f"unknown suites: {', '.join(sorted(unknown))}")
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.lam is None and self.lam_factor <= 0:
            raise ValueError("lam_factor must be positive")
        if min(self.d, self.n, self.n_pairs, self.n_measure_pairs, self.n_points, self.point_dim,
               self.n_straight) < 1:
            raise ValueError("suite sizes must be >= 1")
        return self

    def lam_for(self, spec: TerminalLossSpec) -> float:
        return self.lam if self.lam is not None else self.lam_factor * self.T * spec.L**2


@dataclass
class SuiteResult:
    suite: str
    head: str
    cases: int
    violations: int
    worst_slack: float
    lam: float
    L: float
    constant: float
    passed: bool
    error: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _random_spec(kind: str, c: int, width: int, rng: RngState) -> TerminalLossSpec:
    return TerminalLossSpec(kind, rng.normal((c, width)) / np.sqrt(width))


def _targets(kind: str, c: int, rng: RngState) -> np.ndarray:
    if kind == "mse":
        return rng.normal((c, 1))
    return rng.dirichlet(np.ones(c))[:, None]


def _failed(suite: str, head: str, err: Exception, lam: float, L: float) -> SuiteResult:
    return SuiteResult(suite, head, 0, 1, float("inf"), lam, L, float("nan"), False,
                       f"{type(err).__name__}: {err}")


def straightness_suite(cfg: TheoryConfig) -> list[SuiteResult]:
    rng = RngState(cfg.seed, 11)
    out = []
    for kind in ("mse", "softmax_ce"):
        c = cfg.d * cfg.n if kind == "mse" else cfg.d
        spec = _random_spec(kind, c, cfg.d * cfg.n, rng)
        lam = cfg.lam_for(spec)
        worst, worst_disp, worst_chord = -np.inf, 0.0, 0.0
        try:
            for _ in range(cfg.n_straight):
                X0 = rng.normal((cfg.d, cfg.n))
                sol = solve_terminal(X0, _targets(kind, c, rng), spec, cfg.T, lam)
                m = straightness_metrics(optimal_trajectory(sol, cfg.T))
                worst_disp = max(worst_disp, m.velocity_dispersion)
                worst_chord = max(worst_chord, m.chord_deviation)
                worst = max(worst, m.velocity_dispersion - cfg.straight_tol, m.chord_deviation - cfg.straight_tol)
        except (ConditionViolation, OracleNonConvergence) as err:
            out.append(_failed("straightness", kind, err, lam, spec.L))
            continue
        out.append(SuiteResult("straightness", kind, cfg.n_straight, int(worst > 0), float(worst), lam, spec.L,
                               certified_constant(spec, cfg.T, lam), bool(worst <= 0),
                               extra={"velocity_dispersion": worst_disp, "chord_deviation": worst_chord}))
    return out


def stability_suite(cfg: TheoryConfig, kind: str) -> SuiteResult:
    stream = 12 if kind == "mse" else 13
    name = "stability_mse" if kind == "mse" else "stability_ce"
    rng = RngState(cfg.seed, stream)
    width = cfg.d * cfg.n
    c = cfg.d
    spec = _random_spec(kind, c, width, rng)
    lam = cfg.lam_for(spec)
    pairs = []
    for _ in range(cfg.n_pairs):
        x1 = rng.normal((cfg.d, cfg.n))
        # mix near and far pairs so the bound is probed at several scales
        scale = 10.0 ** rng.uniform() * 0.1 if rng.uniform() < 0.5 else 1.0
        x2 = x1 + scale * rng.normal((cfg.d, cfg.n))
        pairs.append(((x1, _targets(kind, c, rng)), (x2, _targets(kind, c, rng))))
    try:
        rep = check_stability_bound(pairs, spec, cfg.T, lam, cfg.tol)
    except (ConditionViolation, OracleNonConvergence) as err:
        return _failed(name, kind, err, lam, spec.L)
    return SuiteResult(name, kind, rep.n_pairs, rep.violations, rep.max_slack, lam, spec.L, rep.constant,
                       rep.passed, extra={"tightness_counts": rep.tightness_counts})


def pushforward_suite(cfg: TheoryConfig) -> SuiteResult:
    rng = RngState(cfg.seed, 14)
    q = cfg.point_dim
    spec = _random_spec("mse", q, q, rng)
    lam = cfg.lam_for(spec)
    y = rng.normal((q, 1))
    try:
        if lam <= cfg.T * spec.L**2:
            raise ConditionViolation(f"need lambda > T L^2, got lambda={lam:g}, T L^2={cfg.T * spec.L**2:.6g}")
        const = certified_constant(spec, cfg.T, lam)
        budget = spec.L * const
        mapping = oracle_map(spec, y, cfg.T, lam, shape=(q, 1))
        worst, worst_ratio, violations = -np.inf, 0.0, 0
        for _ in range(cfg.n_measure_pairs):
            mu = EmpiricalMeasure(rng.normal((cfg.n_points, q)))
            shift = rng.normal((1, q)) * rng.uniform()
            nu = EmpiricalMeasure(rng.normal((cfg.n_points, q)) * (0.5 + rng.uniform()) + shift)
            rep = check_pushforward_stability(mapping, mu, nu, budget, p=2, tol=cfg.tol)
            slack = rep.w_out - budget * rep.w_in
            worst = max(worst, slack)
            worst_ratio = max(worst_ratio, rep.ratio)
            violations += int(not rep.satisfied)
    except (ConditionViolation, OracleNonConvergence) as err:
        return _failed("pushforward", "mse", err, lam, spec.L)
    return SuiteResult("pushforward", "mse", cfg.n_measure_pairs, violations, float(worst), lam, spec.L, const,
                       violations == 0, extra={"max_ratio": worst_ratio, "budget": budget})


def wasserstein_suite(cfg: TheoryConfig, cases: int = 50) -> SuiteResult:
    """Metric axioms of the exact solver and agreement with the 1-D sorted coupling."""
    rng = RngState(cfg.seed, 15)
    N, q = cfg.n_points, cfg.point_dim
    worst = {"symmetry": 0.0, "triangle": -np.inf, "identity": 0.0, "sorted_1d": 0.0, "positivity": np.inf}
    for _ in range(cases):
        a, b, c = (EmpiricalMeasure(rng.normal((N, q))) for _ in range(3))
        ab, ba = wasserstein_p(a, b), wasserstein_p(b, a)
        worst["symmetry"] = max(worst["symmetry"], abs(ab - ba))
        worst["triangle"] = max(worst["triangle"], ab - wasserstein_p(a, c) - wasserstein_p(c, b))
        perm = EmpiricalMeasure(a.points[rng.gen.permutation(N)])
        worst["identity"] = max(worst["identity"], wasserstein_p(a, perm))
        worst["positivity"] = min(worst["positivity"], ab)
        u, v = EmpiricalMeasure(rng.normal((N, 1))), EmpiricalMeasure(rng.normal((N, 1)) + rng.uniform())
        worst["sorted_1d"] = max(worst["sorted_1d"], abs(wasserstein_p(u, v) - wasserstein_1d_sorted(u, v)))
    slack = max(worst["symmetry"] - 1e-12, worst["triangle"] - cfg.tol, worst["identity"] - 1e-12,
                worst["sorted_1d"] - 1e-12)
    ok = slack <= 0 and worst["positivity"] > 0
    return SuiteResult("wasserstein", "-", cases, int(not ok), float(slack), float("nan"), float("nan"),
                       float("nan"), bool(ok), extra=worst)


def run_theory(cfg: TheoryConfig) -> list[SuiteResult]:
    cfg.validate()
    results: list[SuiteResult] = []
    if "straightness" in cfg.suites:
        results += straightness_suite(cfg)
    if "stability_mse" in cfg.suites:
        results.append(stability_suite(cfg, "mse"))
    if "stability_ce" in cfg.suites:
        results.append(stability_suite(cfg, "softmax_ce"))
    if "pushforward" in cfg.suites:
        results.append(pushforward_suite(cfg))
    if "wasserstein" in cfg.suites:
        results.append(wasserstein_suite(cfg))
    return results

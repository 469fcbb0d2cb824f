import pytest

from ot_transformer.theory import TheoryConfig, run_theory


def test_default_suites_pass():
    results = run_theory(TheoryConfig(n_pairs=100, n_measure_pairs=20))
    assert {r.suite for r in results} == {"straightness", "stability_mse", "stability_ce", "pushforward",
                                          "wasserstein"}
    assert all(r.passed for r in results), [(r.suite, r.error) for r in results if not r.passed]


def test_condition_violation_fails_without_raising():
    results = run_theory(TheoryConfig(lam=1e-3, n_pairs=10, n_measure_pairs=5,
                                      suites=("stability_mse", "pushforward", "straightness")))
    assert results and not any(r.passed for r in results)
    assert all("ConditionViolation" in r.error for r in results)


def test_lambda_just_above_threshold_still_certifies():
    results = run_theory(TheoryConfig(lam_factor=1.05, n_pairs=100, suites=("stability_mse", "stability_ce")))
    assert all(r.passed for r in results)


def test_validation():
    with pytest.raises(ValueError):
        TheoryConfig(suites=("nope",)).validate()
    with pytest.raises(ValueError):
        TheoryConfig(T=0).validate()
    with pytest.raises(ValueError):
        TheoryConfig(n_pairs=0).validate()

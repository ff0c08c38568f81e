import dataclasses
import logging
import math
import warnings

import numpy as np
import pytest

from meanvar_oed.benchmarks import (
    lg_exact_expected_utility,
    lg_exact_utility,
    lg_exact_utility_variance,
)
from meanvar_oed.errors import (
    ConfigurationError,
    DegenerateMarginalWarning,
    EstimationError,
)
from meanvar_oed.estimators import (
    EstimatorConfig,
    compute_outer_terms,
    estimate_expected_utility,
    estimate_m2c,
    estimate_marginal_log_likelihood,
    estimate_objective,
    estimate_variance,
    exact_utility_grid,
    resolve_bank,
    utility_distribution,
    weighted_loglik_ratio,
)
from meanvar_oed.problem import (
    DesignDomain,
    GaussianNoiseModel,
    ProblemDefinition,
    SampleBank,
    UniformPrior,
    build_sample_bank,
    log_likelihood,
    sample_prior,
)


@pytest.fixture
def overflowing_problem():
    """Every independent inner likelihood underflows to zero."""
    return ProblemDefinition(
        name="overflow",
        prior=UniformPrior(0.0, 1.0),
        forward=lambda thetas, xi: thetas * 1e60,
        noise=GaussianNoiseModel.iid(1e-200, 1),
        domain=DesignDomain([0.0], [1.0]),
    )


def test_config_defaults_and_alias():
    config = EstimatorConfig.build(n=100, **{"lambda": 2.0})
    assert (config.m1, config.m2, config.lam) == (100, 100, 2.0)
    assert config.reuse


@pytest.mark.parametrize(
    "values",
    [
        {"n": 1},
        {"n": 100, "m1": 50},
        {"n": 10, "max_drop_fraction": 2.0},
        {"n": 10, "workers": 0},
        {"n": 100, "m1": 0, "reuse": False},
        {"n": 100, "m2": 0, "reuse": False},
    ],
)
def test_config_rejects_invalid(values):
    with pytest.raises(ConfigurationError):
        EstimatorConfig.build(**values)


def test_independent_inner_sizes_allowed():
    config = EstimatorConfig.build(n=100, m1=50, m2=20, reuse=False)
    assert (config.m1, config.m2) == (50, 20)


def test_marginal_with_single_inner_sample(lingauss):
    value = estimate_marginal_log_likelihood([2.5], [[0.7]], lingauss, [1.5])
    expected = log_likelihood(lingauss, [2.5], 0.7, [1.5])
    assert value == pytest.approx(expected, abs=1e-14)


def test_marginal_matches_closed_form(lingauss):
    inner = sample_prior(lingauss, 100_000, seed=7)
    value = estimate_marginal_log_likelihood([0.0], inner, lingauss, [1.0])
    assert value == pytest.approx(-0.5 * math.log(2 * math.pi * 10.0), abs=0.01)


def test_marginal_degenerate_returns_minus_inf(overflowing_problem):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        warnings.simplefilter("always", DegenerateMarginalWarning)
        with pytest.warns(DegenerateMarginalWarning):
            value = estimate_marginal_log_likelihood(
                [0.0], [[0.5]], overflowing_problem, [1.0]
            )
    assert value == -math.inf


def test_uninformative_design_gives_zero(lingauss):
    report = estimate_objective(lingauss, [0.0], EstimatorConfig.build(n=500), seed=1)
    assert abs(report.u_hat) < 1e-10
    assert abs(report.v_hat) < 1e-8


def test_constant_model_moments(constant_problem):
    config = EstimatorConfig.build(n=200)
    report = estimate_objective(constant_problem, [0.5], config, seed=2)
    assert report.m2b == pytest.approx(-2.0 * report.m2a, rel=1e-12)
    assert report.m2c == pytest.approx(report.m2a, rel=1e-12)
    assert abs(report.m2_hat) < 1e-10
    assert abs(report.u_hat) < 1e-12


def test_report_identities(nonlinear1d):
    config = EstimatorConfig.build(n=300, **{"lambda": 1.5})
    report = estimate_objective(nonlinear1d, [0.6], config, seed=4)
    assert report.m2_hat == report.m2a + report.m2b + report.m2c
    assert report.v_hat == report.m2_hat - report.u_hat**2
    assert report.j_hat == report.u_hat - 1.5 * report.v_hat
    assert report.dropped_count == 0
    assert report.seed == 4


def test_zero_lambda_reduces_to_expected_utility(nonlinear1d):
    config = EstimatorConfig.build(n=300)
    bank = build_sample_bank(nonlinear1d, 300, 8)
    report = estimate_objective(nonlinear1d, [0.3], config, bank=bank)
    assert report.j_hat == report.u_hat
    utility = estimate_expected_utility(nonlinear1d, [0.3], bank, config)
    assert report.u_hat == utility.u_hat


def test_variance_and_m2c_helpers_agree_with_report(nonlinear1d):
    config = EstimatorConfig.build(n=200)
    bank = build_sample_bank(nonlinear1d, 200, 3)
    report = estimate_objective(nonlinear1d, [0.8], config, bank=bank)
    assert estimate_variance(nonlinear1d, [0.8], bank, config) == report.v_hat
    assert estimate_m2c(nonlinear1d, [0.8], bank, config) == report.m2c


def test_forward_evaluation_counts(lingauss):
    reuse = estimate_objective(lingauss, [1.0], EstimatorConfig.build(n=100), seed=0)
    assert reuse.forward_evaluations == 100
    config = EstimatorConfig.build(n=100, m1=30, m2=20, reuse=False)
    independent = estimate_objective(lingauss, [1.0], config, seed=0)
    assert independent.forward_evaluations == 100 * (1 + 30 + 20)


def test_outer_sample_permutation_invariance(nonlinear1d):
    config = EstimatorConfig.build(n=400)
    bank = build_sample_bank(nonlinear1d, 400, 5)
    order = np.random.default_rng(0).permutation(400)
    shuffled = SampleBank(
        master_seed=bank.master_seed,
        prior_samples=bank.prior_samples[order],
        noise_draws=bank.noise_draws[order],
    )
    first = estimate_objective(nonlinear1d, [0.4], config, bank=bank)
    second = estimate_objective(nonlinear1d, [0.4], config, bank=shuffled)
    assert second.u_hat == pytest.approx(first.u_hat, rel=1e-10)
    assert second.v_hat == pytest.approx(first.v_hat, rel=1e-8)


def test_workers_do_not_change_results(nonlinear2d):
    serial = EstimatorConfig.build(n=1000)
    threaded = EstimatorConfig.build(n=1000, workers=4)
    first = estimate_objective(nonlinear2d, [0.2, 0.9], serial, seed=12)
    second = estimate_objective(nonlinear2d, [0.2, 0.9], threaded, seed=12)
    assert (first.u_hat, first.v_hat) == (second.u_hat, second.v_hat)


def test_common_random_sampling_ignores_per_call_seed(lingauss):
    config = EstimatorConfig.build(n=200, crs_seed=3)
    first = estimate_objective(lingauss, [1.0], config, seed=5)
    second = estimate_objective(lingauss, [1.0], config, seed=9)
    assert first.u_hat == second.u_hat
    assert first.seed == second.seed == 3
    assert resolve_bank(lingauss, config, seed=1).same_contents(
        resolve_bank(lingauss, config, seed=2)
    )


def test_seed_required_without_crs(lingauss):
    with pytest.raises(ConfigurationError):
        estimate_objective(lingauss, [1.0], EstimatorConfig.build(n=50))


def test_bank_too_small(lingauss):
    bank = build_sample_bank(lingauss, 50, 0)
    with pytest.raises(ConfigurationError):
        compute_outer_terms(lingauss, [1.0], bank, EstimatorConfig.build(n=100))


def test_degenerate_marginals_are_dropped_and_reported(overflowing_problem):
    config = EstimatorConfig.build(n=10, m1=10, m2=10, reuse=False)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        with pytest.raises(EstimationError):
            estimate_objective(overflowing_problem, [1.0], config, seed=0)
    assert any(issubclass(w.category, DegenerateMarginalWarning) for w in caught)


def test_linear_gaussian_expected_utility(lingauss):
    report = estimate_objective(lingauss, [3.0], EstimatorConfig.build(n=2000), seed=21)
    assert report.u_hat == pytest.approx(0.5 * math.log(82.0), abs=0.15)
    assert report.u_se > 0


def test_linear_gaussian_variance(lingauss):
    report = estimate_objective(lingauss, [3.0], EstimatorConfig.build(n=2000), seed=21)
    assert report.v_hat == pytest.approx(lg_exact_utility_variance(3.0), abs=0.15)
    assert report.v_se > 0


def test_reuse_and_independent_utility_agree_across_seeds(lingauss):
    config = EstimatorConfig.build(n=800, m1=800, m2=800, reuse=False)
    independent_values = []
    for seed in range(20):
        reuse = estimate_objective(lingauss, [1.0], EstimatorConfig.build(n=800), seed=seed)
        independent = estimate_objective(lingauss, [1.0], config, seed=seed)
        combined_se = math.hypot(reuse.u_se, independent.u_se)
        assert abs(reuse.u_hat - independent.u_hat) < 3 * combined_se
        independent_values.append(independent.u_hat)
    mean_se = np.std(independent_values, ddof=1) / math.sqrt(20)
    error = abs(np.mean(independent_values) - lg_exact_expected_utility(1.0))
    assert error < 3 * mean_se + 0.01


def test_independent_sampling_logs_variance_bias_warning(lingauss, caplog):
    caplog.set_level(logging.WARNING, logger="meanvar_oed.estimators")
    estimate_objective(lingauss, [1.0], EstimatorConfig.build(n=50), seed=0)
    assert "Independent inner sampling" not in caplog.text
    config = EstimatorConfig.build(n=50, m1=20, m2=20, reuse=False)
    estimate_objective(lingauss, [1.0], config, seed=0)
    assert "O(1/M) bias" in caplog.text


@pytest.mark.slow
def test_linear_gaussian_large_sample(lingauss):
    config = EstimatorConfig.build(n=10_000, crs_seed=1)
    for xi in (1.0, 2.0, 3.0):
        report = estimate_objective(lingauss, [xi], config)
        u_error = abs(report.u_hat - lg_exact_expected_utility(xi))
        assert u_error < 3 * report.u_se + 0.01
        v_error = abs(report.v_hat - lg_exact_utility_variance(xi))
        assert v_error < 3 * report.v_se + 0.02


@pytest.mark.slow
def test_nonlinear_mean_variance_tradeoff(nonlinear1d):
    config = EstimatorConfig.build(n=10_000, crs_seed=0, **{"lambda": 1.0})
    near = estimate_objective(nonlinear1d, [0.2], config)
    far = estimate_objective(nonlinear1d, [1.0], config)
    assert far.u_hat > near.u_hat
    assert near.j_hat > far.j_hat


def test_grid_utility_matches_conjugate(lingauss):
    value = exact_utility_grid(lingauss, [1.0], [1.0], grid_size=2000)
    assert value == pytest.approx(lg_exact_utility(1.0, 1.0), abs=1e-3)


def test_grid_utility_uninformative_design(lingauss):
    assert abs(exact_utility_grid(lingauss, [0.0], [0.7], grid_size=500)) < 1e-8


def test_grid_utility_converges_with_refinement(nonlinear1d):
    coarse = exact_utility_grid(nonlinear1d, [0.2], [0.505], grid_size=200)
    fine = exact_utility_grid(nonlinear1d, [0.2], [0.505], grid_size=400)
    assert abs(coarse - fine) < 1e-4


def test_utility_distribution_matches_conjugate(lingauss):
    dist = utility_distribution(lingauss, [1.0], count=50, seed=0, grid_size=1000)
    expected = [lg_exact_utility(1.0, y) for y in dist.observations[:, 0]]
    np.testing.assert_allclose(dist.utilities, expected, atol=1e-3)
    worst = dist.utilities[dist.worst]
    assert np.all(np.diff(worst) >= 0)
    assert worst[0] == dist.utilities.min()
    assert dist.std > 0


def _lg_second_moment_terms(xi):
    """Closed-form M2a, M2b, M2c for the linear-Gaussian benchmark (prior N(0, 9), unit noise)."""
    s2 = 9.0 * xi * xi + 1.0
    r = 9.0 * xi * xi / s2
    c0 = -0.5 * math.log(2 * math.pi)
    c = -0.5 * math.log(2 * math.pi * s2)
    m2a = c * c - c + 0.75
    m2b = -2.0 * (c0 * c - 0.5 * c0 - 0.5 * c + (9.0 * xi * xi + 3.0) / (4.0 * s2))
    k = c0 - 0.5 * r
    m2c = k * k - k / s2 + 0.75 / (s2 * s2)
    return m2a, m2b, m2c


@pytest.mark.parametrize("xi", [0.5, 1.0, 3.0])
def test_second_moment_closed_forms_are_consistent(xi):
    m2a, m2b, m2c = _lg_second_moment_terms(xi)
    u = lg_exact_expected_utility(xi)
    assert m2a + m2b + m2c - u * u == pytest.approx(lg_exact_utility_variance(xi), rel=1e-12)


def test_second_moment_terms_match_closed_forms(lingauss):
    config = EstimatorConfig.build(n=4000)
    bank = build_sample_bank(lingauss, 4000, 17)
    outer = compute_outer_terms(lingauss, [1.0], bank, config)
    report = estimate_objective(lingauss, [1.0], config, bank=bank)
    samples = {
        "m2a": outer.log_marginal**2,
        "m2b": -2.0 * outer.log_likelihood * outer.log_marginal,
        "m2c": outer.m2c_ratio**2,
    }
    for name, expected in zip(samples, _lg_second_moment_terms(1.0)):
        values = samples[name]
        se = np.std(values, ddof=1) / math.sqrt(values.size)
        assert getattr(report, name) == pytest.approx(np.mean(values), rel=1e-12)
        assert abs(getattr(report, name) - expected) < 4 * se + 0.02, name


@pytest.mark.slow
def test_m2c_at_large_design_matches_closed_form(lingauss):
    config = EstimatorConfig.build(n=10_000)
    bank = build_sample_bank(lingauss, 10_000, 2)
    outer = compute_outer_terms(lingauss, [3.0], bank, config)
    values = outer.m2c_ratio**2
    se = np.std(values, ddof=1) / math.sqrt(values.size)
    assert abs(np.mean(values) - _lg_second_moment_terms(3.0)[2]) < 3 * se + 5e-3


def test_single_inner_sample_ratio_reduces_to_direct_form(lingauss):
    bank = build_sample_bank(lingauss, 64, 9)
    outer = compute_outer_terms(lingauss, [2.0], bank, EstimatorConfig.build(n=64))
    # one inner sample per row, aligned with the outer draw
    ratio = weighted_loglik_ratio(outer.log_likelihood[:, None], outer.log_marginal, 1)
    direct = np.exp(outer.log_likelihood - outer.log_marginal) * outer.log_likelihood
    np.testing.assert_allclose(ratio, direct, rtol=1e-12)


def test_two_dimensional_estimates_are_permutation_symmetric(nonlinear2d):
    config = EstimatorConfig.build(n=500)
    bank = build_sample_bank(nonlinear2d, 500, 31)
    exchanged = SampleBank(
        master_seed=bank.master_seed,
        prior_samples=bank.prior_samples,
        noise_draws=np.ascontiguousarray(bank.noise_draws[:, ::-1]),
    )
    first = estimate_objective(nonlinear2d, [0.15, 0.8], config, bank=bank)
    second = estimate_objective(nonlinear2d, [0.8, 0.15], config, bank=exchanged)
    for name in ("u_hat", "m2a", "m2b", "m2c", "v_hat"):
        assert getattr(second, name) == pytest.approx(getattr(first, name), rel=1e-12), name


def _counting(problem):
    rows = []

    def forward(thetas, xi):
        rows.append(thetas.shape[0])
        return problem.forward(thetas, xi)

    return dataclasses.replace(problem, forward=forward), rows


@pytest.mark.parametrize("n", [100, 300, 700])
def test_reuse_evaluates_forward_model_once_per_outer_sample(nonlinear1d, n):
    counted, rows = _counting(nonlinear1d)
    report = estimate_objective(counted, [0.4], EstimatorConfig.build(n=n), seed=3)
    assert sum(rows) == n == report.forward_evaluations


def test_independent_forward_model_cost(nonlinear1d):
    counted, rows = _counting(nonlinear1d)
    config = EstimatorConfig.build(n=300, m1=40, m2=25, reuse=False)
    report = estimate_objective(counted, [0.4], config, seed=3)
    assert sum(rows) == 300 * (1 + 40 + 25) == report.forward_evaluations


@pytest.mark.slow
def test_linear_gaussian_variance_replicates(lingauss):
    config = EstimatorConfig.build(n=10_000)
    values = [estimate_objective(lingauss, [3.0], config, seed=100 + k).v_hat for k in range(10)]
    exact = lg_exact_utility_variance(3.0)
    assert abs(np.mean(values) - exact) < 0.05 * exact


@pytest.mark.slow
def test_nonlinear_sweep_prefers_low_design(nonlinear1d):
    config = EstimatorConfig.build(n=10_000, crs_seed=0, **{"lambda": 1.0})
    grid = np.linspace(0.0, 1.0, 61)
    objective = [estimate_objective(nonlinear1d, [xi], config).j_hat for xi in grid]
    assert abs(grid[int(np.argmax(objective))] - 0.2) <= 0.05

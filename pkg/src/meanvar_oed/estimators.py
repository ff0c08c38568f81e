"""
Nested Monte Carlo estimators of the expected information gain, the utility
second moment and variance, and the mean-variance objective.

All likelihood arithmetic is done in log space. With sample reuse the outer
prior samples double as the inner samples, so one design evaluation costs N
forward-model evaluations. Fixing ``crs_seed`` makes every design evaluation
draw from the same sample bank (common random sampling).
"""

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.special import logsumexp

from .errors import ConfigurationError, DegenerateMarginalWarning, EstimationError
from .problem import (
    ProblemDefinition,
    SampleBank,
    build_sample_bank,
    gaussian_log_likelihood,
)
from .utils import INNER_M1_STREAM, INNER_M2_STREAM, stream

logger = logging.getLogger(__name__)

# Outer samples are processed in blocks of this many rows. Inner draws for the
# non-reuse estimator are keyed by block index, so this value is part of the
# reproducibility contract.
OUTER_BLOCK = 256


class EstimatorConfig(BaseModel):
    """
    Sample sizes and penalty for one objective evaluation.

    ``m1`` and ``m2`` default to ``n``; with ``reuse`` on they must equal it.
    """

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    n: int = Field(ge=2, description="Outer sample count N")
    m1: int = Field(ge=2, description="Inner count for the marginal likelihood")
    m2: int = Field(ge=2, description="Inner count for the M2c numerator")
    reuse: bool = True
    lam: float = Field(default=0.0, alias="lambda")
    crs_seed: Optional[int] = Field(default=None, ge=0, lt=2**64)
    max_drop_fraction: float = Field(default=0.01, ge=0.0, le=1.0)
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _default_inner_sizes(cls, data):
        if isinstance(data, dict):
            data = dict(data)
            for key in ("m1", "m2"):
                if data.get(key) is None:
                    data[key] = data.get("n")
        return data

    @model_validator(mode="after")
    def _check_reuse(self):
        if self.reuse and not (self.m1 == self.m2 == self.n):
            raise ValueError("sample reuse requires n == m1 == m2")
        return self

    @classmethod
    def build(cls, **values) -> "EstimatorConfig":
        """Construct a config, reporting validation failures as ConfigurationError."""
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid estimator configuration: {e}") from e


@dataclass(frozen=True, eq=False)
class OuterTerms:
    """Per-outer-sample quantities shared by all estimators of one design."""

    log_likelihood: np.ndarray
    log_marginal: np.ndarray
    m2c_ratio: np.ndarray
    kept: np.ndarray
    forward_evaluations: int

    @property
    def dropped(self) -> int:
        return int(self.kept.size - np.count_nonzero(self.kept))

    @property
    def utility_terms(self) -> np.ndarray:
        return self.log_likelihood[self.kept] - self.log_marginal[self.kept]


@dataclass(frozen=True, eq=False)
class UtilityEstimate:
    u_hat: float
    terms: np.ndarray
    outer: OuterTerms


@dataclass(frozen=True, eq=False)
class EstimateReport:
    """Point estimates and their decomposition for one design."""

    design: np.ndarray
    u_hat: float
    m2a: float
    m2b: float
    m2c: float
    m2_hat: float
    v_hat: float
    j_hat: float
    n: int
    m1: int
    m2: int
    lam: float
    seed: int
    dropped_count: int
    u_se: float
    v_se: float
    forward_evaluations: int

    @property
    def negative_variance(self) -> bool:
        return self.v_hat < 0


def _warn_degenerate(count: int) -> None:
    warnings.warn(
        f"{count} outer sample(s) had a zero marginal likelihood estimate",
        DegenerateMarginalWarning,
        stacklevel=3,
    )


def weighted_loglik_ratio(
    inner_loglik: np.ndarray, log_marginal: np.ndarray, m2: int
) -> np.ndarray:
    """
    Ratio [(1/M2) sum_k p_k log p_k] / p_hat for each outer row.

    ``inner_loglik`` holds log p_k per row. The signed numerator is summed
    under a per-row max shift and recombined with ``log_marginal`` in log space.
    """
    shift = np.max(inner_loglik, axis=-1)
    with np.errstate(invalid="ignore", over="ignore"):
        signed = np.sum(np.exp(inner_loglik - shift[..., None]) * inner_loglik, axis=-1)
        with np.errstate(divide="ignore"):
            log_abs = np.log(np.abs(signed))
        return np.sign(signed) * np.exp(log_abs + shift - math.log(m2) - log_marginal)


def _reuse_block(y, means, noise, n):
    inner = gaussian_log_likelihood(y[:, None, :], means[None, :, :], noise)
    log_marginal = logsumexp(inner, axis=1) - math.log(n)
    return log_marginal, weighted_loglik_ratio(inner, log_marginal, n)


def _independent_block(problem, xi, y, block_index, seed, config):
    rows = y.shape[0]
    nobs = problem.noise.dim
    thetas1 = problem.prior.sample(stream(seed, INNER_M1_STREAM, block_index), rows * config.m1)
    means1 = problem.predict(thetas1, xi).reshape(rows, config.m1, nobs)
    inner1 = gaussian_log_likelihood(y[:, None, :], means1, problem.noise)
    log_marginal = logsumexp(inner1, axis=1) - math.log(config.m1)

    thetas2 = problem.prior.sample(stream(seed, INNER_M2_STREAM, block_index), rows * config.m2)
    means2 = problem.predict(thetas2, xi).reshape(rows, config.m2, nobs)
    inner2 = gaussian_log_likelihood(y[:, None, :], means2, problem.noise)
    return log_marginal, weighted_loglik_ratio(inner2, log_marginal, config.m2)


def compute_outer_terms(
    problem: ProblemDefinition, xi, bank: SampleBank, config: EstimatorConfig
) -> OuterTerms:
    """
    Evaluate log p(y_i|theta_i), log p_hat(y_i) and the M2c ratio per outer sample.

    Raises:
        ConfigurationError: If the bank holds fewer than N samples.
        EstimationError: If more than ``max_drop_fraction`` of the outer samples
            have a degenerate marginal likelihood.
    """
    xi = problem.check_design(xi)
    n = config.n
    if bank.size < n:
        raise ConfigurationError(f"Sample bank holds {bank.size} samples, need {n}")

    means = problem.predict(bank.prior_samples[:n], xi)
    y = means + problem.noise.std * bank.noise_draws[:n]
    log_lik = gaussian_log_likelihood(y, means, problem.noise)
    evaluations = n

    starts = list(range(0, n, OUTER_BLOCK))

    def run(start: int):
        stop = min(start + OUTER_BLOCK, n)
        if config.reuse:
            return _reuse_block(y[start:stop], means, problem.noise, n)
        return _independent_block(
            problem, xi, y[start:stop], start // OUTER_BLOCK, bank.master_seed, config
        )

    if config.workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(start) for start in starts]

    log_marginal = np.concatenate([r[0] for r in results])
    ratio = np.concatenate([r[1] for r in results])
    if not config.reuse:
        evaluations += n * (config.m1 + config.m2)

    kept = np.isfinite(log_marginal) & np.isfinite(ratio)
    dropped = int(n - np.count_nonzero(kept))
    if dropped:
        _warn_degenerate(dropped)
        logger.warning(f"Dropped {dropped} of {n} outer samples at design {xi.tolist()}")
        if dropped > config.max_drop_fraction * n:
            raise EstimationError(
                f"{dropped} of {n} outer samples have a degenerate marginal likelihood "
                f"(limit {config.max_drop_fraction:.2%})"
            )

    return OuterTerms(
        log_likelihood=log_lik,
        log_marginal=log_marginal,
        m2c_ratio=ratio,
        kept=kept,
        forward_evaluations=evaluations,
    )


def estimate_marginal_log_likelihood(
    y, inner_params, problem: ProblemDefinition, xi
) -> float:
    """
    log p_hat(y|xi) = log[(1/M1) sum_j p(y|theta_j, xi)] via log-sum-exp.

    Returns -inf, with a ``DegenerateMarginalWarning``, when every inner
    likelihood is zero.
    """
    y = problem.check_observation(np.atleast_1d(np.asarray(y, dtype=np.float64)))
    thetas = problem.check_params(inner_params)
    if thetas.shape[0] == 0:
        raise ConfigurationError("At least one inner parameter sample is required")
    loglik = gaussian_log_likelihood(y, problem.predict(thetas, xi), problem.noise)
    if not np.any(np.isfinite(loglik)):
        _warn_degenerate(1)
        return -math.inf
    return float(logsumexp(loglik) - math.log(thetas.shape[0]))


def estimate_expected_utility(
    problem: ProblemDefinition, xi, bank: SampleBank, config: EstimatorConfig
) -> UtilityEstimate:
    """Expected information gain U_hat and its N per-sample summands."""
    outer = compute_outer_terms(problem, xi, bank, config)
    terms = outer.utility_terms
    return UtilityEstimate(u_hat=float(np.mean(terms)), terms=terms, outer=outer)


def estimate_m2a(outer: OuterTerms, config: EstimatorConfig) -> float:
    """Mean of the squared marginal log-likelihood estimates."""
    log_marginal = outer.log_marginal[outer.kept]
    return float(np.mean(log_marginal * log_marginal))


def estimate_m2b(outer: OuterTerms, config: EstimatorConfig) -> float:
    """-2 times the mean of log p(y_i|theta_i) * log p_hat(y_i) over joint draws."""
    kept = outer.kept
    return float(-2.0 * np.mean(outer.log_likelihood[kept] * outer.log_marginal[kept]))


def _m2c(outer: OuterTerms) -> float:
    ratio = outer.m2c_ratio[outer.kept]
    return float(np.mean(ratio * ratio))


def estimate_m2c(
    problem: ProblemDefinition, xi, bank: SampleBank, config: EstimatorConfig
) -> float:
    """Mean over outer samples of the squared likelihood-weighted log-likelihood ratio."""
    return _m2c(compute_outer_terms(problem, xi, bank, config))


def _assemble(xi, outer: OuterTerms, config: EstimatorConfig, seed: int) -> EstimateReport:
    terms = outer.utility_terms
    u_hat = float(np.mean(terms))
    m2a = estimate_m2a(outer, config)
    m2b = estimate_m2b(outer, config)
    m2c = _m2c(outer)
    m2_hat = m2a + m2b + m2c
    v_hat = m2_hat - u_hat**2
    j_hat = u_hat - config.lam * v_hat

    kept = outer.kept
    count = terms.size
    log_marginal = outer.log_marginal[kept]
    ratio = outer.m2c_ratio[kept]
    second = (
        log_marginal * log_marginal
        - 2.0 * outer.log_likelihood[kept] * log_marginal
        + ratio * ratio
    )
    influence = second - 2.0 * u_hat * terms
    u_se = float(np.std(terms, ddof=1) / math.sqrt(count)) if count > 1 else math.nan
    v_se = float(np.std(influence, ddof=1) / math.sqrt(count)) if count > 1 else math.nan

    if v_hat < 0:
        logger.warning(f"Negative utility variance estimate {v_hat:.3e} at design {xi.tolist()}")

    return EstimateReport(
        design=xi,
        u_hat=u_hat,
        m2a=m2a,
        m2b=m2b,
        m2c=m2c,
        m2_hat=m2_hat,
        v_hat=v_hat,
        j_hat=j_hat,
        n=config.n,
        m1=config.m1,
        m2=config.m2,
        lam=config.lam,
        seed=seed,
        dropped_count=outer.dropped,
        u_se=u_se,
        v_se=v_se,
        forward_evaluations=outer.forward_evaluations,
    )


def resolve_bank(
    problem: ProblemDefinition,
    config: EstimatorConfig,
    seed: int | None = None,
    bank: SampleBank | None = None,
) -> SampleBank:
    """
    Pick the sample bank for one design evaluation.

    An explicit bank wins; otherwise ``crs_seed`` (shared across designs) and
    then the per-evaluation ``seed``. There is no implicit seeding.
    """
    if bank is not None:
        return bank
    if config.crs_seed is not None:
        return build_sample_bank(problem, config.n, config.crs_seed)
    if seed is None:
        raise ConfigurationError("A seed is required when crs_seed is not set")
    return build_sample_bank(problem, config.n, seed)


def estimate_variance(
    problem: ProblemDefinition, xi, bank: SampleBank, config: EstimatorConfig
) -> float:
    """V_hat = M2_hat - U_hat^2; may be negative at small N and is not clamped."""
    xi = problem.check_design(xi)
    outer = compute_outer_terms(problem, xi, bank, config)
    return _assemble(xi, outer, config, bank.master_seed).v_hat


def estimate_objective(
    problem: ProblemDefinition,
    xi,
    config: EstimatorConfig,
    seed: int | None = None,
    bank: SampleBank | None = None,
) -> EstimateReport:
    """
    Estimate J_lambda(xi) = U_hat - lambda * (M2_hat - U_hat^2) with its decomposition.

    Args:
        problem: Problem definition.
        xi: Design point.
        config: Estimator configuration.
        seed: Per-evaluation seed, used when ``config.crs_seed`` is unset.
        bank: Prebuilt bank; must come from the same seed the caller reports.

    Returns:
        EstimateReport for the design.
    """
    xi = problem.check_design(xi)
    bank = resolve_bank(problem, config, seed, bank)
    if not config.reuse:
        logger.warning(
            f"Independent inner sampling at design {xi.tolist()}: V_hat carries an "
            f"O(1/M) bias from the M2c ratio (M1={config.m1}, M2={config.m2}) and is "
            f"heavy-tailed; prefer reuse for variance estimates"
        )
    outer = compute_outer_terms(problem, xi, bank, config)
    return _assemble(xi, outer, config, bank.master_seed)


@dataclass(frozen=True, eq=False)
class GridPosterior:
    """Parameter grid with forward predictions for one design, reused across y."""

    nodes: np.ndarray
    means: np.ndarray
    log_prior_weights: np.ndarray


def grid_posterior_setup(problem: ProblemDefinition, xi, grid_size: int) -> GridPosterior:
    """Build the midpoint grid over the prior's bounded support for ``xi``."""
    if problem.prior.dim > 2:
        raise ConfigurationError("Grid quadrature supports parameter dimension <= 2")
    if grid_size < 2:
        raise ConfigurationError("Grid size must be at least 2")
    xi = problem.check_design(xi)
    lower, upper = problem.prior.grid_bounds()
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ConfigurationError("Grid quadrature requires a bounded prior support")
    axes = [
        lower[k] + (np.arange(grid_size) + 0.5) * (upper[k] - lower[k]) / grid_size
        for k in range(problem.prior.dim)
    ]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, problem.prior.dim)
    log_prior = problem.prior.log_density(nodes)
    support = np.isfinite(log_prior)
    if not np.any(support):
        raise EstimationError("No grid node lies inside the prior support")
    nodes = nodes[support]
    log_prior = log_prior[support]
    return GridPosterior(
        nodes=nodes,
        means=problem.predict(nodes, xi),
        log_prior_weights=log_prior - logsumexp(log_prior),
    )


def grid_kl(grid: GridPosterior, y: np.ndarray, problem: ProblemDefinition) -> float:
    """Discrete KL divergence from the grid prior to the grid posterior given y."""
    log_post = gaussian_log_likelihood(y, grid.means, problem.noise) + grid.log_prior_weights
    if not np.any(np.isfinite(log_post)):
        raise EstimationError("Grid posterior underflows at every node")
    log_post = log_post - logsumexp(log_post)
    weights = np.exp(log_post)
    nonzero = weights > 0
    return float(np.sum(weights[nonzero] * (log_post[nonzero] - grid.log_prior_weights[nonzero])))


def exact_utility_grid(problem: ProblemDefinition, xi, y, grid_size: int) -> float:
    """
    KL information gain u(xi, y) by grid discretization of the parameter space.

    The posterior p(theta|y,xi) is formed on a uniform midpoint grid over the
    prior's bounded support and compared with the prior on the same grid.
    """
    y = problem.check_observation(np.atleast_1d(np.asarray(y, dtype=np.float64)))
    return grid_kl(grid_posterior_setup(problem, xi, grid_size), y, problem)


@dataclass(frozen=True, eq=False)
class UtilityDistribution:
    """Realized information gains at one design."""

    design: np.ndarray
    parameters: np.ndarray
    observations: np.ndarray
    utilities: np.ndarray
    worst: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.utilities))

    @property
    def std(self) -> float:
        return float(np.std(self.utilities, ddof=1))


def utility_distribution(
    problem: ProblemDefinition,
    xi,
    count: int,
    seed: int,
    grid_size: int = 200,
    worst: int = 5,
) -> UtilityDistribution:
    """
    Draw (theta, y) pairs and compute the realized KL gain for each.

    ``worst`` holds the indices of the lowest-utility realizations, lowest first.
    """
    xi = problem.check_design(xi)
    bank = build_sample_bank(problem, count, seed)
    grid = grid_posterior_setup(problem, xi, grid_size)
    means = problem.predict(bank.prior_samples, xi)
    observations = means + problem.noise.std * bank.noise_draws
    utilities = np.array([grid_kl(grid, y, problem) for y in observations])
    order = np.argsort(utilities, kind="stable")
    return UtilityDistribution(
        design=xi,
        parameters=np.array(bank.prior_samples),
        observations=observations,
        utilities=utilities,
        worst=order[: min(worst, count)],
    )

"""
Bayesian optimization of the mean-variance objective over the design domain.

A Gaussian process with a squared-exponential ARD kernel is fit to the
estimated objective values; the next design maximizes an acquisition function
(UCB by default, expected improvement optionally) over seeded random
candidates refined by coordinate ascent.
"""

import logging
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.stats import norm, qmc

from .errors import ConfigurationError, EstimationError
from .estimators import EstimatorConfig, estimate_objective, resolve_bank
from .problem import DesignDomain, ProblemDefinition
from .utils import CANDIDATE_STREAM, DESIGN_STREAM, LOG_2PI, derive_seed, stream

logger = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-6
VARIANCE_TOLERANCE = 1e-10
MAX_INITIAL_BATCHES = 100

# Log-space bounds for coordinate refinement of the hyperparameters.
LENGTHSCALE_BOUNDS = (1e-2, 1e1)
SIGNAL_BOUNDS = (1e-3, 1e2)
NOISE_BOUNDS = (1e-8, 1.0)


class HyperConfig(BaseModel):
    """Multi-start grid and refinement settings for GP hyperparameters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lengthscales: tuple[float, ...] = tuple(np.geomspace(0.05, 2.0, 7).tolist())
    signal_variances: tuple[float, ...] = (0.1, 1.0, 10.0)
    noise_variances: tuple[float, ...] = (1e-4, 1e-2, 1e-1)
    fixed_noise: Optional[float] = Field(default=None, ge=0)
    refine_steps: int = Field(default=20, ge=0)


class BoConfig(BaseModel):
    """Settings of the outer optimization loop."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_init: int = Field(default=5, ge=2)
    budget: int = Field(default=25, ge=1)
    kappa: float = Field(default=2.0, ge=0)
    acquisition: Literal["ucb", "ei"] = "ucb"
    candidates: int = Field(default=1024, ge=1)
    local_starts: int = Field(default=8, ge=1)
    hyper: HyperConfig = HyperConfig()

    @classmethod
    def build(cls, **values) -> "BoConfig":
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid optimizer configuration: {e}") from e


def _sq_distances(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    diff = (a[:, None, :] - b[None, :, :]) / lengthscales
    return np.sum(diff * diff, axis=-1)


def _factor(kernel: np.ndarray, noise: float) -> tuple[tuple[np.ndarray, bool], float]:
    """Cholesky factor of kernel + noise*I, escalating jitter when needed."""
    eye = np.eye(kernel.shape[0])
    jitter = 0.0
    while True:
        try:
            return cho_factor(kernel + (noise + jitter) * eye, lower=True), jitter
        except LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX:
                raise
            logger.debug(f"Kernel matrix not positive definite; jitter {jitter:.0e}")


def _log_marginal(inputs, targets, lengthscales, signal, noise) -> float:
    kernel = signal * np.exp(-0.5 * _sq_distances(inputs, inputs, lengthscales))
    try:
        factor, _ = _factor(kernel, noise)
    except LinAlgError:
        return -math.inf
    alpha = cho_solve(factor, targets)
    return float(
        -0.5 * targets @ alpha
        - np.sum(np.log(np.diag(factor[0])))
        - 0.5 * targets.size * LOG_2PI
    )


@dataclass(frozen=True, eq=False)
class GpSurrogate:
    """
    Fitted GP over designs normalized to the unit box.

    Targets are standardized before fitting; predictions are returned on the
    original scale. Predictive variance is that of the latent function.
    """

    domain: DesignDomain
    inputs: np.ndarray
    targets: np.ndarray
    target_mean: float
    target_scale: float
    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float
    jitter: float
    log_marginal_likelihood: float
    cholesky: tuple = field(repr=False)
    alpha: np.ndarray = field(repr=False)

    @property
    def prior_std(self) -> float:
        return math.sqrt(self.signal_variance) * self.target_scale

    def predict(self, designs) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and variance at each row of ``designs``."""
        designs = np.asarray(designs, dtype=np.float64).reshape(-1, self.domain.dim)
        unit = self.domain.to_unit(designs)
        cross = self.signal_variance * np.exp(
            -0.5 * _sq_distances(unit, self.inputs, self.lengthscales)
        )
        mean = cross @ self.alpha
        v = solve_triangular(self.cholesky[0], cross.T, lower=True)
        var = self.signal_variance - np.sum(v * v, axis=0)
        if np.any(var < -VARIANCE_TOLERANCE):
            logger.debug(f"Clamped predictive variance {var.min():.3e} to zero")
        var = np.maximum(var, 0.0)
        return (
            self.target_mean + self.target_scale * mean,
            self.target_scale**2 * var,
        )


def _refine(inputs, targets, params, fixed_noise, steps):
    """
    Coordinate search in log space starting from the best grid point.

    ``params`` is (lengthscales..., signal, noise); a fixed noise is left as is.
    """
    d = inputs.shape[1]
    free = d + 1 if fixed_noise is not None else d + 2
    bounds = np.log([LENGTHSCALE_BOUNDS] * d + [SIGNAL_BOUNDS, NOISE_BOUNDS])[:free]
    log_params = np.log(params[:free])
    noise = fixed_noise

    def score(lp):
        p = np.exp(lp)
        return _log_marginal(inputs, targets, p[:d], p[d], p[d + 1] if noise is None else noise)

    best = score(log_params)
    step = math.log(2.0)
    for _ in range(steps):
        improved = False
        for k in range(free):
            for direction in (1.0, -1.0):
                trial = log_params.copy()
                trial[k] = np.clip(trial[k] + direction * step, bounds[k, 0], bounds[k, 1])
                value = score(trial)
                if value > best:
                    best, log_params, improved = value, trial, True
                    break
        if not improved:
            step *= 0.5
    refined = params.copy()
    refined[:free] = np.exp(log_params)
    return refined, best


def gp_fit(
    designs, values, domain: DesignDomain, hyper: HyperConfig | None = None
) -> GpSurrogate:
    """
    Fit a GP surrogate to evaluated (design, objective) pairs.

    Hyperparameters maximize the log marginal likelihood: a grid search over
    a shared lengthscale, the signal variance and the noise variance, then
    coordinate refinement with per-dimension lengthscales. The result is a
    deterministic function of the inputs.

    Args:
        designs: Evaluated designs, shape (m, d).
        values: Objective values, shape (m,).
        domain: Design domain used to normalize inputs.
        hyper: Hyperparameter search settings.

    Returns:
        The fitted surrogate.

    Raises:
        ConfigurationError: If there are no pairs or the shapes disagree.
        EstimationError: If no hyperparameter setting gives a factorizable kernel.
    """
    hyper = hyper or HyperConfig()
    designs = np.asarray(designs, dtype=np.float64).reshape(-1, domain.dim)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if designs.shape[0] < 1 or designs.shape[0] != values.size:
        raise ConfigurationError("GP fit needs matching, non-empty designs and values")
    if designs.shape[1] != domain.dim:
        raise ConfigurationError(f"Designs have dimension {designs.shape[1]}, expected {domain.dim}")

    inputs = domain.to_unit(designs)
    target_mean = float(values.mean())
    target_scale = float(values.std())
    if not target_scale > 0:
        target_scale = 1.0
    targets = (values - target_mean) / target_scale

    noises = (hyper.fixed_noise,) if hyper.fixed_noise is not None else hyper.noise_variances
    d = domain.dim
    best_params, best_score = None, -math.inf
    for ell, signal, noise in product(hyper.lengthscales, hyper.signal_variances, noises):
        score = _log_marginal(inputs, targets, np.full(d, ell), signal, noise)
        if score > best_score:
            best_params = np.concatenate([np.full(d, ell), [signal, noise]])
            best_score = score
    if best_params is None:
        raise EstimationError("No GP hyperparameter setting gave a positive definite kernel")
    params, _ = _refine(inputs, targets, best_params, hyper.fixed_noise, hyper.refine_steps)

    lengthscales, signal, noise = params[:d], float(params[d]), float(params[d + 1])
    kernel = signal * np.exp(-0.5 * _sq_distances(inputs, inputs, lengthscales))
    try:
        factor, jitter = _factor(kernel, noise)
    except LinAlgError as e:
        raise EstimationError(f"Kernel matrix is not positive definite: {e}") from e
    if jitter > 0:
        logger.warning(f"GP fit needed jitter {jitter:.0e} on the kernel diagonal")
    return GpSurrogate(
        domain=domain,
        inputs=inputs,
        targets=targets,
        target_mean=target_mean,
        target_scale=target_scale,
        lengthscales=lengthscales,
        signal_variance=signal,
        noise_variance=noise,
        jitter=jitter,
        log_marginal_likelihood=_log_marginal(inputs, targets, lengthscales, signal, noise),
        cholesky=factor,
        alpha=cho_solve(factor, targets),
    )


def _is_single_design(surrogate: GpSurrogate, designs) -> bool:
    designs = np.asarray(designs)
    return designs.ndim <= 1 and designs.size == surrogate.domain.dim


def acquisition_ucb(surrogate: GpSurrogate, designs, kappa: float = 2.0):
    """
    Upper confidence bound mean + kappa * std.

    ``designs`` is read as rows of length d, so a flat array of d-dimensional
    designs is accepted; a single design gives a scalar.
    """
    mean, var = surrogate.predict(designs)
    scores = mean + kappa * np.sqrt(var)
    return float(scores[0]) if _is_single_design(surrogate, designs) else scores


def acquisition_ei(surrogate: GpSurrogate, designs, best: float, margin: float = 0.0):
    """Expected improvement over ``best`` for maximization."""
    mean, var = surrogate.predict(designs)
    std = np.sqrt(var)
    improvement = mean - best - margin
    scores = np.maximum(improvement, 0.0)
    positive = std > 0
    z = improvement[positive] / std[positive]
    scores[positive] = improvement[positive] * norm.cdf(z) + std[positive] * norm.pdf(z)
    return float(scores[0]) if _is_single_design(surrogate, designs) else scores


def _acquisition(
    surrogate: GpSurrogate, kind: str, kappa: float
) -> Callable[[np.ndarray], np.ndarray]:
    if kind == "ucb":
        return lambda x: acquisition_ucb(surrogate, x, kappa)
    if kind == "ei":
        best = surrogate.target_mean + surrogate.target_scale * float(surrogate.targets.max())
        return lambda x: acquisition_ei(surrogate, x, best)
    raise ConfigurationError(f"Unknown acquisition '{kind}'")


def _coordinate_ascent(score, start, value, feasible, domain: DesignDomain):
    point = start.copy()
    step = 0.1
    while step >= 1e-4:
        improved = False
        for k in range(domain.dim):
            for direction in (1.0, -1.0):
                unit = domain.to_unit(point)
                unit[k] = min(max(unit[k] + direction * step, 0.0), 1.0)
                trial = domain.from_unit(unit)
                if not feasible(trial):
                    continue
                trial_value = float(score(trial[None, :])[0])
                if trial_value > value:
                    point, value, improved = trial, trial_value, True
                    break
        if not improved:
            step *= 0.5
    return point, value


def propose_next(
    surrogate: GpSurrogate,
    domain: DesignDomain,
    constraint: Callable[[np.ndarray], bool] | None = None,
    seed: int = 0,
    acquisition: str = "ucb",
    kappa: float = 2.0,
    candidates: int = 1024,
    local_starts: int = 8,
) -> np.ndarray:
    """
    Maximize the acquisition over feasible designs.

    Seeded uniform candidates are scored, and the best ``local_starts`` are
    refined by coordinate ascent that never leaves the feasible set. Ties go
    to the lowest candidate index.

    Raises:
        EstimationError: If every candidate is infeasible.
    """
    rng = stream(seed, CANDIDATE_STREAM)
    points = domain.from_unit(rng.uniform(size=(candidates, domain.dim)))

    def feasible(xi: np.ndarray) -> bool:
        return domain.is_feasible(xi) and (constraint is None or bool(constraint(xi)))

    points = points[[feasible(p) for p in points]]
    if points.shape[0] == 0:
        raise EstimationError("All acquisition candidates are infeasible")
    score = _acquisition(surrogate, acquisition, kappa)
    values = score(points)
    order = np.argsort(-values, kind="stable")[:local_starts]

    best_point, best_value = None, -math.inf
    for index in order:
        point, value = _coordinate_ascent(score, points[index], values[index], feasible, domain)
        if value > best_value:
            best_point, best_value = point, value
    return best_point


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    design: np.ndarray
    j_hat: float
    u_hat: float
    v_hat: float
    best_so_far: float


@dataclass
class BoState:
    """Evaluated designs and the running best of one optimization run."""

    budget: int
    n_init: int
    designs: list[np.ndarray] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    trace: list[TraceRecord] = field(default_factory=list)
    iterations: int = 0
    skipped: int = 0

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.values))

    @property
    def best_design(self) -> np.ndarray:
        return self.designs[self.best_index]

    @property
    def best_value(self) -> float:
        return self.values[self.best_index]

    def record(self, design, report) -> None:
        self.designs.append(design)
        self.values.append(report.j_hat)
        self.trace.append(
            TraceRecord(
                iteration=self.iterations,
                design=design,
                j_hat=report.j_hat,
                u_hat=report.u_hat,
                v_hat=report.v_hat,
                best_so_far=max(self.values),
            )
        )


def initial_designs(domain: DesignDomain, count: int, seed: int) -> np.ndarray:
    """
    Seeded space-filling designs from a Latin hypercube, infeasible ones dropped.

    Raises:
        ConfigurationError: If too few feasible designs are found.
    """
    sampler = qmc.LatinHypercube(d=domain.dim, seed=stream(seed, DESIGN_STREAM))
    kept: list[np.ndarray] = []
    for _ in range(MAX_INITIAL_BATCHES):
        for point in domain.from_unit(sampler.random(count)):
            if domain.is_feasible(point):
                kept.append(point)
                if len(kept) == count:
                    return np.array(kept)
    raise ConfigurationError(f"Found only {len(kept)} feasible initial designs of {count}")


def run_bo(
    problem: ProblemDefinition,
    lam: float,
    config: BoConfig,
    estimator: EstimatorConfig,
    seed: int,
) -> BoState:
    """
    Maximize J_lambda over the problem's design domain.

    With ``estimator.crs_seed`` set, one sample bank is built up front and used
    for every design; otherwise each evaluation gets its own seed derived from
    ``seed``. Designs whose estimation fails are skipped and counted.

    Args:
        problem: Design problem.
        lam: Variance penalty lambda.
        config: Loop settings.
        estimator: Sample sizes and CRS seed.
        seed: Master seed for initial designs, candidates and per-design seeds.

    Returns:
        Final BoState with the full trace.
    """
    estimator = estimator.model_copy(update={"lam": lam})
    domain = problem.domain
    bank = resolve_bank(problem, estimator) if estimator.crs_seed is not None else None
    state = BoState(budget=config.budget, n_init=config.n_init)

    def evaluate(design: np.ndarray) -> None:
        state.iterations += 1
        try:
            report = estimate_objective(
                problem,
                design,
                estimator,
                seed=derive_seed(seed, DESIGN_STREAM, state.iterations),
                bank=bank,
            )
        except EstimationError as e:
            state.skipped += 1
            logger.warning(f"Skipping design {design.tolist()}: {e}")
            return
        state.record(design, report)
        logger.info(
            f"BO evaluation {state.iterations}: design={design.tolist()} "
            f"j_hat={report.j_hat:.6g} best={state.best_value:.6g}"
        )

    for design in initial_designs(domain, config.n_init, seed):
        evaluate(design)

    for t in range(config.budget):
        if not state.designs:
            raise EstimationError("Every initial design failed to evaluate")
        surrogate = gp_fit(np.array(state.designs), np.array(state.values), domain, config.hyper)
        proposal = propose_next(
            surrogate,
            domain,
            seed=derive_seed(seed, CANDIDATE_STREAM, t),
            acquisition=config.acquisition,
            kappa=config.kappa,
            candidates=config.candidates,
            local_starts=config.local_starts,
        )
        evaluate(proposal)

    if not state.designs:
        raise EstimationError("No design could be evaluated")
    logger.info(
        f"BO finished: best design {state.best_design.tolist()} "
        f"j_hat={state.best_value:.6g}, {state.skipped} skipped"
    )
    return state

"""
Problem abstraction for Bayesian optimal experimental design.

A ``ProblemDefinition`` bundles the prior over parameters, the forward model
G(theta, xi), the additive Gaussian noise model and the design domain. The
seeded ``SampleBank`` holds the prior and noise draws shared by all estimators.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, EstimationError
from .utils import LOG_2PI, NOISE_STREAM, PRIOR_STREAM, check_seed, stream

logger = logging.getLogger(__name__)

# Forward maps are vectorized over parameter samples: (K, p) x (d,) -> (K, n).
ForwardMap = Callable[[np.ndarray, np.ndarray], np.ndarray]
Constraint = Callable[[np.ndarray], bool]

MAX_REJECTION_ATTEMPTS = 10_000
BOUNDS_SLACK = 1e-12


def _as_vector(values, name: str) -> np.ndarray:
    array = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if array.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape {array.shape}")
    return array


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array, dtype=np.float64)
    array.setflags(write=False)
    return array


class Prior(ABC):
    """Sampler and density evaluator over the parameter space."""

    @property
    @abstractmethod
    def dim(self) -> int:
        """Parameter dimension p."""

    @abstractmethod
    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Draw ``count`` independent samples, shape (count, p)."""

    @abstractmethod
    def log_density(self, thetas: np.ndarray) -> np.ndarray:
        """Log prior density at each row of ``thetas``; -inf outside the support."""

    @abstractmethod
    def contains(self, thetas: np.ndarray) -> np.ndarray:
        """Boolean support indicator for each row of ``thetas``."""

    @abstractmethod
    def grid_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounded box used for grid quadrature over the parameter space."""


class GaussianPrior(Prior):
    """Independent Gaussian prior with diagonal covariance."""

    # Half-width of the quadrature box in prior standard deviations.
    GRID_HALF_WIDTH = 8.0

    def __init__(self, mean: Sequence[float] | float, variance: Sequence[float] | float):
        self.mean = _frozen(_as_vector(mean, "prior mean"))
        self.variance = _frozen(_as_vector(variance, "prior variance"))
        if self.mean.shape != self.variance.shape:
            raise DimensionError("Prior mean and variance must have the same length")
        if np.any(self.variance <= 0):
            raise ConfigurationError("Prior variance must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        draws = rng.standard_normal((count, self.dim))
        return self.mean + np.sqrt(self.variance) * draws

    def log_density(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        z = (thetas - self.mean) ** 2 / self.variance
        return -0.5 * (z.sum(axis=1) + self.dim * LOG_2PI + np.log(self.variance).sum())

    def contains(self, thetas: np.ndarray) -> np.ndarray:
        return np.all(np.isfinite(np.atleast_2d(thetas)), axis=1)

    def grid_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        half = self.GRID_HALF_WIDTH * np.sqrt(self.variance)
        return self.mean - half, self.mean + half


class UniformPrior(Prior):
    """Uniform prior on an axis-aligned box."""

    def __init__(self, low: Sequence[float] | float, high: Sequence[float] | float):
        self.low = _frozen(_as_vector(low, "prior lower bound"))
        self.high = _frozen(_as_vector(high, "prior upper bound"))
        if self.low.shape != self.high.shape:
            raise DimensionError("Prior bounds must have the same length")
        if np.any(self.high <= self.low):
            raise ConfigurationError("Prior upper bounds must exceed lower bounds")
        self._log_volume = float(np.log(self.high - self.low).sum())

    @property
    def dim(self) -> int:
        return self.low.size

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(count, self.dim))

    def log_density(self, thetas: np.ndarray) -> np.ndarray:
        inside = self.contains(thetas)
        return np.where(inside, -self._log_volume, -np.inf)

    def contains(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        return np.all((thetas >= self.low) & (thetas <= self.high), axis=1)

    def grid_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.low.copy(), self.high.copy()


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned rectangle ``[xmin, xmax] x [ymin, ymax]``."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Closed-set membership for each row of an (K, 2) array."""
        points = np.atleast_2d(points)
        x, y = points[:, 0], points[:, 1]
        return (x >= self.xmin) & (x <= self.xmax) & (y >= self.ymin) & (y <= self.ymax)

    def overlaps(self, other: "Rectangle") -> bool:
        return not (
            self.xmax <= other.xmin
            or other.xmax <= self.xmin
            or self.ymax <= other.ymin
            or other.ymax <= self.ymin
        )


class MaskedUniformPrior(Prior):
    """
    Uniform prior over the unit square with rectangular obstacles removed.

    Sampling is by rejection. A draw that fails ``MAX_REJECTION_ATTEMPTS``
    consecutive proposals is reported as a configuration error.
    """

    def __init__(self, obstacles: Sequence[Rectangle]):
        self.obstacles = tuple(obstacles)
        self.accessible_area = 1.0 - sum(r.area for r in self.obstacles)
        if self.accessible_area <= 0:
            raise ConfigurationError("Obstacles cover the whole unit square")
        self._log_area = math.log(self.accessible_area)

    @property
    def dim(self) -> int:
        return 2

    def blocked(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        mask = np.zeros(points.shape[0], dtype=bool)
        for rect in self.obstacles:
            mask |= rect.contains(points)
        return mask

    def contains(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        in_box = np.all((thetas >= 0.0) & (thetas <= 1.0), axis=1)
        return in_box & ~self.blocked(thetas)

    def log_density(self, thetas: np.ndarray) -> np.ndarray:
        return np.where(self.contains(thetas), -self._log_area, -np.inf)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        accepted = np.empty((count, 2))
        filled = 0
        misses = 0
        while filled < count:
            needed = count - filled
            block = max(64, int(1.25 * needed / max(self.accessible_area, 1e-3)))
            proposals = rng.uniform(0.0, 1.0, size=(block, 2))
            keep = proposals[self.contains(proposals)]
            if keep.shape[0] == 0:
                misses += block
                if misses >= MAX_REJECTION_ATTEMPTS:
                    raise ConfigurationError(
                        f"Rejection sampling failed after {misses} attempts; "
                        "the accessible region is too small"
                    )
                continue
            misses = 0
            take = min(needed, keep.shape[0])
            accepted[filled : filled + take] = keep[:take]
            filled += take
        return accepted

    def grid_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(2), np.ones(2)


@dataclass(frozen=True, eq=False)
class GaussianNoiseModel:
    """Additive zero-mean Gaussian noise with diagonal covariance."""

    variance: np.ndarray

    def __post_init__(self):
        variance = _frozen(_as_vector(self.variance, "noise variance"))
        if np.any(~np.isfinite(variance)) or np.any(variance <= 0):
            raise ConfigurationError("Noise variances must be finite and strictly positive")
        object.__setattr__(self, "variance", variance)
        object.__setattr__(self, "std", _frozen(np.sqrt(variance)))
        object.__setattr__(
            self,
            "log_normalizer",
            float(-0.5 * variance.size * LOG_2PI - 0.5 * np.log(variance).sum()),
        )

    @classmethod
    def iid(cls, variance: float, n: int) -> "GaussianNoiseModel":
        return cls(np.full(n, float(variance)))

    @property
    def dim(self) -> int:
        return self.variance.size


@dataclass(frozen=True, eq=False)
class DesignDomain:
    """Box bounds for the design, with an optional feasibility predicate."""

    lower: np.ndarray
    upper: np.ndarray
    constraint: Constraint | None = None

    def __post_init__(self):
        lower = _frozen(_as_vector(self.lower, "design lower bound"))
        upper = _frozen(_as_vector(self.upper, "design upper bound"))
        if lower.shape != upper.shape:
            raise DimensionError("Design bounds must have the same length")
        if np.any(upper < lower):
            raise ConfigurationError("Design upper bounds must not be below lower bounds")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def in_bounds(self, xi: np.ndarray) -> bool:
        return bool(np.all(xi >= self.lower) and np.all(xi <= self.upper))

    def is_feasible(self, xi: np.ndarray) -> bool:
        if not self.in_bounds(xi):
            return False
        return self.constraint is None or bool(self.constraint(xi))

    def to_unit(self, xi: np.ndarray) -> np.ndarray:
        width = np.where(self.width > 0, self.width, 1.0)
        return (np.asarray(xi) - self.lower) / width

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        return self.lower + np.asarray(u) * self.width


@dataclass(frozen=True, eq=False)
class ProblemDefinition:
    """
    Everything an estimator needs: prior, forward model, noise and domain.

    ``exact_utility`` and ``exact_variance`` are optional closed forms used as
    reference values by the convergence harness.
    """

    name: str
    prior: Prior
    forward: ForwardMap
    noise: GaussianNoiseModel
    domain: DesignDomain
    exact_utility: Callable[[np.ndarray], float] | None = None
    exact_variance: Callable[[np.ndarray], float] | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.prior.dim < 1 or self.noise.dim < 1 or self.domain.dim < 1:
            raise ConfigurationError("Problem dimensions must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(d, p, n): design, parameter and observation dimensions."""
        return self.domain.dim, self.prior.dim, self.noise.dim

    def check_design(self, xi) -> np.ndarray:
        xi = _as_vector(xi, "design")
        if xi.size != self.domain.dim:
            raise DimensionError(
                f"Design has length {xi.size}, problem '{self.name}' expects {self.domain.dim}"
            )
        slack = BOUNDS_SLACK * np.maximum(self.domain.width, 1.0)
        if np.any(xi < self.domain.lower - slack) or np.any(xi > self.domain.upper + slack):
            raise ConfigurationError(
                f"Design {xi.tolist()} lies outside the domain of '{self.name}' "
                f"[{self.domain.lower.tolist()}, {self.domain.upper.tolist()}]"
            )
        # round-off from unit-cube mapping
        return np.clip(xi, self.domain.lower, self.domain.upper)

    def check_params(self, thetas) -> np.ndarray:
        thetas = np.atleast_1d(np.asarray(thetas, dtype=np.float64))
        if thetas.ndim == 1:
            thetas = thetas.reshape(1, -1) if thetas.size == self.prior.dim else thetas[:, None]
        if thetas.ndim != 2 or thetas.shape[1] != self.prior.dim:
            raise DimensionError(
                f"Parameters have shape {thetas.shape}, expected (K, {self.prior.dim})"
            )
        return thetas

    def check_observation(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != self.noise.dim:
            raise DimensionError(
                f"Observation has length {y.shape[-1]}, expected {self.noise.dim}"
            )
        return y

    def predict(self, thetas: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Vectorized forward evaluation, shape (K, n); raises on non-finite output."""
        thetas = self.check_params(thetas)
        xi = self.check_design(xi)
        means = np.asarray(self.forward(thetas, xi), dtype=np.float64)
        if means.ndim == 1:
            means = means[:, None]
        if means.shape != (thetas.shape[0], self.noise.dim):
            raise DimensionError(
                f"Forward model returned shape {means.shape}, "
                f"expected ({thetas.shape[0]}, {self.noise.dim})"
            )
        if not np.all(np.isfinite(means)):
            raise EstimationError(f"Forward model '{self.name}' returned non-finite values")
        return means


@dataclass(frozen=True, eq=False)
class SampleBank:
    """Seeded prior draws and standard-normal noise draws, indexed 0..N-1."""

    master_seed: int
    prior_samples: np.ndarray
    noise_draws: np.ndarray

    @property
    def size(self) -> int:
        return self.prior_samples.shape[0]

    def same_contents(self, other: "SampleBank") -> bool:
        return (
            self.master_seed == other.master_seed
            and np.array_equal(self.prior_samples, other.prior_samples)
            and np.array_equal(self.noise_draws, other.noise_draws)
        )


def sample_prior(problem: ProblemDefinition, count: int, seed: int) -> np.ndarray:
    """
    Draw ``count`` independent prior samples.

    Args:
        problem: Problem whose prior is sampled.
        count: Number of draws, at least 1.
        seed: Seed of the draw; equal seeds give equal samples.

    Returns:
        Array of shape (count, p).
    """
    if count < 1:
        raise ConfigurationError(f"Sample count must be at least 1, got {count}")
    return problem.prior.sample(stream(seed, PRIOR_STREAM), count)


def forward_eval(problem: ProblemDefinition, theta, xi) -> np.ndarray:
    """Return the observation mean G(theta, xi) for a single parameter sample."""
    theta = problem.check_params(theta)
    if theta.shape[0] != 1:
        raise DimensionError("forward_eval takes a single parameter sample")
    return problem.predict(theta, xi)[0]


def sample_observation(problem: ProblemDefinition, theta, xi, noise_draw) -> np.ndarray:
    """Return G(theta, xi) + Gamma^(1/2) * noise_draw."""
    noise_draw = _as_vector(noise_draw, "noise draw")
    if noise_draw.size != problem.noise.dim:
        raise DimensionError(
            f"Noise draw has length {noise_draw.size}, expected {problem.noise.dim}"
        )
    return forward_eval(problem, theta, xi) + problem.noise.std * noise_draw


def gaussian_log_likelihood(
    y: np.ndarray, means: np.ndarray, noise: GaussianNoiseModel
) -> np.ndarray:
    """
    Log Gaussian density of ``y`` under each mean, broadcasting over leading axes.

    Includes the -(n/2) log(2 pi) - 1/2 log|Gamma| normalizing constant.
    """
    residual = (y - means) / noise.std
    return noise.log_normalizer - 0.5 * np.sum(residual * residual, axis=-1)


def log_likelihood(problem: ProblemDefinition, y, theta, xi) -> float:
    """log p(y | theta, xi) for the additive Gaussian noise model."""
    y = problem.check_observation(_as_vector(y, "observation"))
    mean = forward_eval(problem, theta, xi)
    return float(gaussian_log_likelihood(y, mean, problem.noise))


def build_sample_bank(problem: ProblemDefinition, size: int, master_seed: int) -> SampleBank:
    """
    Build the reproducible prior/noise sample bank.

    The prior and noise draws come from distinct sub-streams of ``master_seed``,
    so consuming one never changes the other.
    """
    if size < 2:
        raise ConfigurationError(f"Sample bank size must be at least 2, got {size}")
    master_seed = check_seed(master_seed)
    prior_samples = problem.prior.sample(stream(master_seed, PRIOR_STREAM), size)
    noise_draws = stream(master_seed, NOISE_STREAM).standard_normal((size, problem.noise.dim))
    logger.debug(f"Built sample bank of size {size} from seed {master_seed}")
    return SampleBank(
        master_seed=master_seed,
        prior_samples=_frozen(prior_samples),
        noise_draws=_frozen(noise_draws),
    )

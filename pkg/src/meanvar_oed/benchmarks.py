"""
Benchmark problems with known structure.

``lingauss-1d``: G = theta * xi with a conjugate Gaussian prior, for which the
expected information gain and the utility variance have closed forms.
``nonlinear-1d`` / ``nonlinear-2d``: G = theta^3 xi^2 + theta exp(-1.3 |0.2 - xi|)
with a uniform prior, applied componentwise for two-dimensional designs.
"""

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .problem import (
    DesignDomain,
    GaussianNoiseModel,
    GaussianPrior,
    ProblemDefinition,
    UniformPrior,
)


class LinearGaussianSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    prior_mean: float = 0.0
    prior_var: float = Field(default=9.0, gt=0)
    noise_var: float = Field(default=1.0, gt=0)
    design_lower: float = 0.0
    design_upper: float = 3.0


class NonlinearSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    design_dim: int = 1
    noise_var: float = Field(default=1e-4, gt=0)
    prior_low: float = 0.0
    prior_high: float = 1.0
    design_lower: float = 0.0
    design_upper: float = 1.0

    @field_validator("design_dim")
    @classmethod
    def _check_dim(cls, value: int) -> int:
        if value not in (1, 2):
            raise ValueError("nonlinear model supports design dimension 1 or 2")
        return value


def _signal_fraction(xi: float, spec: LinearGaussianSpec) -> float:
    signal = spec.prior_var * xi * xi
    return signal / (signal + spec.noise_var)


def lg_exact_expected_utility(xi, spec: LinearGaussianSpec | None = None) -> float:
    """Closed-form EIG 1/2 ln(1 + s0^2 xi^2 / se^2) of the linear-Gaussian model."""
    spec = spec or LinearGaussianSpec()
    xi = float(np.asarray(xi).reshape(-1)[0])
    return 0.5 * math.log1p(spec.prior_var * xi * xi / spec.noise_var)


def lg_exact_utility_variance(xi, spec: LinearGaussianSpec | None = None) -> float:
    """
    Closed-form Var_y[u(y)] of the linear-Gaussian model.

    Under conjugacy u(y) = c0 + c1 y^2 with c1 = s0^2 xi^2 / (2 tau^4) and
    y ~ N(0, tau^2), tau^2 = s0^2 xi^2 + se^2, so Var = 2 c1^2 tau^4 = r^2 / 2
    with r = s0^2 xi^2 / tau^2.
    """
    spec = spec or LinearGaussianSpec()
    xi = float(np.asarray(xi).reshape(-1)[0])
    r = _signal_fraction(xi, spec)
    return 0.5 * r * r


def lg_posterior(xi: float, y: float, spec: LinearGaussianSpec | None = None):
    """Posterior mean and variance of theta given y at design xi."""
    spec = spec or LinearGaussianSpec()
    precision = 1.0 / spec.prior_var + xi * xi / spec.noise_var
    variance = 1.0 / precision
    mean = variance * (spec.prior_mean / spec.prior_var + xi * y / spec.noise_var)
    return mean, variance


def lg_exact_utility(xi: float, y: float, spec: LinearGaussianSpec | None = None) -> float:
    """KL(posterior || prior) for one observation y of the linear-Gaussian model."""
    spec = spec or LinearGaussianSpec()
    mean, variance = lg_posterior(xi, y, spec)
    return 0.5 * (
        variance / spec.prior_var
        + (mean - spec.prior_mean) ** 2 / spec.prior_var
        - 1.0
        + math.log(spec.prior_var / variance)
    )


def linear_gaussian_problem(spec: LinearGaussianSpec | None = None) -> ProblemDefinition:
    spec = spec or LinearGaussianSpec()

    def forward(thetas: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return thetas * xi[0]

    return ProblemDefinition(
        name="lingauss-1d",
        prior=GaussianPrior(spec.prior_mean, spec.prior_var),
        forward=forward,
        noise=GaussianNoiseModel.iid(spec.noise_var, 1),
        domain=DesignDomain([spec.design_lower], [spec.design_upper]),
        exact_utility=lambda xi: lg_exact_expected_utility(xi, spec),
        exact_variance=lambda xi: lg_exact_utility_variance(xi, spec),
        metadata={"spec": spec.model_dump()},
    )


def nonlinear_forward(theta, xi):
    """theta^3 xi^2 + theta exp(-1.3 |0.2 - xi|), elementwise."""
    theta = np.asarray(theta, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    return theta**3 * xi**2 + theta * np.exp(-1.3 * np.abs(0.2 - xi))


def nonlinear_problem(spec: NonlinearSpec | None = None) -> ProblemDefinition:
    """Nonlinear benchmark; with ``design_dim=2`` the experiment is performed twice."""
    spec = spec or NonlinearSpec()
    d = spec.design_dim

    def forward(thetas: np.ndarray, xi: np.ndarray) -> np.ndarray:
        # (K, 1) against (d,) broadcasts to (K, d): one observation per component.
        return nonlinear_forward(thetas, xi[None, :])

    return ProblemDefinition(
        name=f"nonlinear-{d}d",
        prior=UniformPrior(spec.prior_low, spec.prior_high),
        forward=forward,
        noise=GaussianNoiseModel.iid(spec.noise_var, d),
        domain=DesignDomain([spec.design_lower] * d, [spec.design_upper] * d),
        metadata={"spec": spec.model_dump()},
    )

import numpy as np
import pytest

from meanvar_oed.benchmarks import (
    NonlinearSpec,
    linear_gaussian_problem,
    nonlinear_problem,
)
from meanvar_oed.diffusion import PdeConfig, build_surrogate
from meanvar_oed.problem import (
    DesignDomain,
    GaussianNoiseModel,
    GaussianPrior,
    ProblemDefinition,
)

# 20 x 20 cells and 8 steps; enough to exercise the solver in milliseconds.
COARSE_PDE = {"dz": 0.05, "dt": 0.005, "final_time": 0.04}


@pytest.fixture
def lingauss():
    return linear_gaussian_problem()


@pytest.fixture
def nonlinear1d():
    return nonlinear_problem()


@pytest.fixture
def nonlinear2d():
    return nonlinear_problem(NonlinearSpec(design_dim=2))


@pytest.fixture
def constant_problem():
    """Forward model independent of theta: no design is informative."""

    def forward(thetas, xi):
        return np.zeros((thetas.shape[0], 1))

    return ProblemDefinition(
        name="constant",
        prior=GaussianPrior(0.0, 1.0),
        forward=forward,
        noise=GaussianNoiseModel.iid(1.0, 1),
        domain=DesignDomain([0.0], [1.0]),
    )


@pytest.fixture
def coarse_pde():
    return PdeConfig(**COARSE_PDE)


@pytest.fixture(scope="session")
def coarse_table():
    return build_surrogate(PdeConfig(**COARSE_PDE), lattice_resolution=11)

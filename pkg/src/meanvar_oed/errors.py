"""
Exception hierarchy for meanvar-oed.

Each error class carries the process exit code the CLI reports for it.
"""


class MeanVarOedError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigurationError(MeanVarOedError):
    """Invalid or inconsistent configuration, or an infeasible problem setup."""

    exit_code = 2


class DimensionError(ConfigurationError):
    """A parameter, design, or observation has the wrong length."""


class EstimationError(MeanVarOedError):
    """A Monte Carlo estimate or an optimization step could not be completed."""

    exit_code = 3


class SolverError(EstimationError):
    """The finite-volume diffusion solver failed."""


class SurrogateCacheError(MeanVarOedError):
    """Reading or writing a surrogate cache file failed."""

    exit_code = 4


class DegenerateMarginalWarning(RuntimeWarning):
    """An outer sample produced a marginal likelihood estimate of zero."""

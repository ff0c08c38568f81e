"""
Empirical convergence studies for the estimators.

A rate study runs R seeded replicates of one estimator at each rung of a
sample-size ladder and records the replicate mean and variance; log-log
slopes of variance and bias against the sample size expose the O(1/N)
behaviour. The CRS study compares the roughness of an estimated curve along a
design grid with and without a shared sample bank.
"""

import logging
import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import ConfigurationError
from .estimators import EstimateReport, EstimatorConfig, estimate_objective
from .problem import ProblemDefinition, build_sample_bank
from .utils import DESIGN_STREAM, REPLICATE_STREAM, check_seed, derive_seed

logger = logging.getLogger(__name__)

EstimatorTag = Literal["u", "m2", "v", "j"]

ESTIMATOR_TAGS = ("u", "m2", "v", "j")
MIN_REPLICATES = 10
MIN_CRS_GRID = 50


def report_value(report: EstimateReport, tag: str) -> float:
    """Pick the estimate named by ``tag`` out of a report."""
    if tag == "u":
        return report.u_hat
    if tag == "m2":
        return report.m2_hat
    if tag == "v":
        return report.v_hat
    if tag == "j":
        return report.j_hat
    raise ConfigurationError(f"Unknown estimator tag '{tag}', expected one of {ESTIMATOR_TAGS}")


@dataclass(frozen=True)
class LoglogFit:
    slope: float
    intercept: float
    residual: float


def fit_loglog_slope(ladder: Sequence[float], values: Sequence[float]) -> LoglogFit:
    """
    Least-squares line through (log ladder, log values).

    ``residual`` is the root-mean-square deviation of the fit in log space.

    Raises:
        ConfigurationError: If fewer than three points are given or any value
            is not strictly positive.
    """
    x = np.asarray(ladder, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if x.size != y.size or x.size < 3:
        raise ConfigurationError("A log-log fit needs at least three matching points")
    if np.any(~(y > 0)) or np.any(~(x > 0)):
        raise ConfigurationError(f"Cannot fit a log-log slope to nonpositive values {y.tolist()}")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    residual = float(np.sqrt(np.mean((ly - (slope * lx + intercept)) ** 2)))
    return LoglogFit(slope=float(slope), intercept=float(intercept), residual=residual)


@dataclass(frozen=True, eq=False)
class RateStudy:
    """Replicate statistics of one estimator over a sample-size ladder."""

    tag: str
    vary: str
    design: np.ndarray
    lam: float
    ladder: tuple[int, ...]
    replicates: int
    values: np.ndarray
    truth: float
    truth_source: str

    @property
    def means(self) -> np.ndarray:
        return self.values.mean(axis=1)

    @property
    def variances(self) -> np.ndarray:
        return self.values.var(axis=1, ddof=1)

    @property
    def bias(self) -> np.ndarray:
        return np.abs(self.means - self.truth)

    def variance_fit(self) -> LoglogFit:
        return fit_loglog_slope(self.ladder, self.variances)

    def bias_fit(self) -> LoglogFit:
        return fit_loglog_slope(self.ladder, self.bias)

    def summary(self) -> str:
        """One-line description with fitted slopes, for logs and the CLI."""
        parts = [
            f"study={self.tag}",
            f"vary={self.vary}",
            f"truth={self.truth!r}",
            f"truth_source={self.truth_source}",
        ]
        for name, fit in (("variance", self.variance_fit), ("bias", self.bias_fit)):
            try:
                parts.append(f"{name}_slope={fit().slope:.4f}")
            except ConfigurationError:
                parts.append(f"{name}_slope=nan")
        return " ".join(parts)


def closed_form_truth(problem: ProblemDefinition, xi, tag: str, lam: float) -> float | None:
    """Exact value of the studied quantity when the problem provides closed forms."""
    if problem.exact_utility is None:
        return None
    u = problem.exact_utility(xi)
    if tag == "u":
        return u
    if problem.exact_variance is None:
        return None
    v = problem.exact_variance(xi)
    return {"m2": v + u * u, "v": v, "j": u - lam * v}[tag]


def _rung_config(vary: str, size: int, fixed_n: int, lam: float) -> EstimatorConfig:
    if vary == "N":
        return EstimatorConfig.build(n=size, reuse=True, lam=lam)
    return EstimatorConfig.build(n=fixed_n, m1=size, m2=fixed_n, reuse=False, lam=lam)


def run_rate_study(
    problem: ProblemDefinition,
    xi,
    tag: EstimatorTag,
    ladder: Sequence[int],
    replicates: int = MIN_REPLICATES,
    master_seed: int = 0,
    lam: float = 0.0,
    truth: float | None = None,
    vary: Literal["N", "M1"] = "N",
    fixed_n: int = 1000,
    truth_factor: int = 10,
    truth_replicates: int = 20,
) -> RateStudy:
    """
    Replicate an estimator at every rung of ``ladder``.

    With ``vary="N"`` the rungs are reuse sample sizes N = M1 = M2. With
    ``vary="M1"`` reuse is off, N and M2 stay at ``fixed_n`` and M1 follows the
    ladder. Replicate seeds are derived from ``master_seed``, the rung index and
    the replicate index, so no two replicates share a stream.

    The reference value is ``truth`` if given, else the problem's closed form,
    else the mean of ``truth_replicates`` reuse estimates at ``truth_factor``
    times the top rung.

    Raises:
        ConfigurationError: On an invalid ladder, replicate count, or tag.
        EstimationError: If any replicate estimate fails.
    """
    if tag not in ESTIMATOR_TAGS:
        raise ConfigurationError(f"Unknown estimator tag '{tag}', expected one of {ESTIMATOR_TAGS}")
    if vary not in ("N", "M1"):
        raise ConfigurationError(f"vary must be 'N' or 'M1', got '{vary}'")
    ladder = tuple(int(size) for size in ladder)
    if len(ladder) < 1 or any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ConfigurationError(f"Ladder must be strictly increasing, got {list(ladder)}")
    if replicates < MIN_REPLICATES:
        raise ConfigurationError(f"At least {MIN_REPLICATES} replicates are required")
    master_seed = check_seed(master_seed)
    xi = problem.check_design(xi)

    values = np.empty((len(ladder), replicates))
    for rung, size in enumerate(ladder):
        config = _rung_config(vary, size, fixed_n, lam)
        for r in range(replicates):
            seed = derive_seed(master_seed, REPLICATE_STREAM, rung, r)
            values[rung, r] = report_value(estimate_objective(problem, xi, config, seed=seed), tag)
        logger.info(
            f"Rate study {tag} {vary}={size}: mean={values[rung].mean():.6g} "
            f"var={values[rung].var(ddof=1):.3e}"
        )

    truth_source = "given"
    if truth is None:
        truth = closed_form_truth(problem, xi, tag, lam)
        truth_source = "closed-form"
    if truth is None:
        truth_source = "self-estimated"
        config = EstimatorConfig.build(n=truth_factor * ladder[-1], reuse=True, lam=lam)
        estimates = [
            report_value(
                estimate_objective(
                    problem,
                    xi,
                    config,
                    seed=derive_seed(master_seed, REPLICATE_STREAM, len(ladder), r),
                ),
                tag,
            )
            for r in range(truth_replicates)
        ]
        truth = float(np.mean(estimates))
        logger.info(f"Self-estimated reference {tag}={truth:.6g} at N={config.n}")

    return RateStudy(
        tag=tag,
        vary=vary,
        design=xi,
        lam=lam,
        ladder=ladder,
        replicates=replicates,
        values=values,
        truth=float(truth),
        truth_source=truth_source,
    )


def total_variation(values: Sequence[float]) -> float:
    """Sum of absolute successive differences along a curve."""
    return float(np.sum(np.abs(np.diff(np.asarray(values, dtype=np.float64)))))


@dataclass(frozen=True, eq=False)
class CrsStudy:
    """An estimated curve along a design grid with and without a shared bank."""

    tag: str
    designs: np.ndarray
    with_crs: np.ndarray
    without_crs: np.ndarray
    n: int

    @property
    def tv_with(self) -> float:
        return total_variation(self.with_crs)

    @property
    def tv_without(self) -> float:
        return total_variation(self.without_crs)


def crs_smoothness_study(
    problem: ProblemDefinition,
    lam: float,
    designs,
    n: int,
    master_seed: int,
    tag: EstimatorTag = "v",
) -> CrsStudy:
    """
    Estimate ``tag`` along ``designs`` twice: once with one sample bank shared
    by every design, once with a fresh seed per design.

    Raises:
        ConfigurationError: If the grid has fewer than 50 designs.
    """
    designs = np.asarray(designs, dtype=np.float64)
    if designs.ndim == 1:
        designs = designs[:, None]
    if designs.shape[0] < MIN_CRS_GRID:
        raise ConfigurationError(f"CRS study needs at least {MIN_CRS_GRID} designs")
    master_seed = check_seed(master_seed)
    config = EstimatorConfig.build(n=n, reuse=True, lam=lam)
    bank = build_sample_bank(problem, n, master_seed)

    with_crs = np.array(
        [report_value(estimate_objective(problem, xi, config, bank=bank), tag) for xi in designs]
    )
    without_crs = np.array(
        [
            report_value(
                estimate_objective(
                    problem, xi, config, seed=derive_seed(master_seed, DESIGN_STREAM, k)
                ),
                tag,
            )
            for k, xi in enumerate(designs)
        ]
    )
    study = CrsStudy(tag=tag, designs=designs, with_crs=with_crs, without_crs=without_crs, n=n)
    logger.info(
        f"CRS study N={n}: TV with CRS {study.tv_with:.4g}, without {study.tv_without:.4g}"
    )
    if not math.isfinite(study.tv_with) or not math.isfinite(study.tv_without):
        logger.warning("CRS study produced a non-finite total variation")
    return study

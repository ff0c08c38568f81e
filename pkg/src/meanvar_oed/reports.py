"""
CSV output for estimates, optimization traces and studies.

Column orders are fixed. Floats are written with ``repr`` so that a value
read back is bit-identical to the one written; ``-`` as a path means stdout.
"""

import contextlib
import csv
import sys
from pathlib import Path
from typing import Iterable, Iterator, TextIO

import numpy as np

from .bayes_opt import BoState
from .convergence import CrsStudy, RateStudy
from .estimators import EstimateReport

REPORT_FIELDS = (
    "u_hat",
    "m2a",
    "m2b",
    "m2c",
    "m2_hat",
    "v_hat",
    "j_hat",
    "N",
    "M1",
    "M2",
    "lambda",
    "seed",
    "dropped_count",
    "u_se",
    "v_se",
    "negative_variance",
)
TRACE_FIELDS = ("j_hat", "u_hat", "v_hat", "best_so_far")
RATE_FIELDS = ("rung", "mean", "variance", "bias", "truth")
CRS_FIELDS = ("with_crs", "without_crs")


def design_columns(dim: int) -> list[str]:
    return [f"xi_{k}" for k in range(dim)]


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


@contextlib.contextmanager
def open_output(path: str | Path) -> Iterator[TextIO]:
    """Yield a text stream for ``path``; ``-`` is stdout and is left open."""
    if str(path) == "-":
        yield sys.stdout
        sys.stdout.flush()
        return
    with open(path, "w", newline="") as f:
        yield f


def report_header(dim: int) -> list[str]:
    return design_columns(dim) + list(REPORT_FIELDS)


def report_row(report: EstimateReport) -> list[str]:
    values = [
        report.u_hat,
        report.m2a,
        report.m2b,
        report.m2c,
        report.m2_hat,
        report.v_hat,
        report.j_hat,
        report.n,
        report.m1,
        report.m2,
        report.lam,
        report.seed,
        report.dropped_count,
        report.u_se,
        report.v_se,
        report.negative_variance,
    ]
    return [_fmt(x) for x in report.design] + [_fmt(v) for v in values]


def write_reports(reports: Iterable[EstimateReport], dim: int, path: str | Path = "-") -> int:
    """Write one row per report; returns the number of rows."""
    count = 0
    with open_output(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(report_header(dim))
        for report in reports:
            writer.writerow(report_row(report))
            count += 1
    return count


def write_trace(state: BoState, dim: int, path: str | Path = "-") -> None:
    with open_output(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["iteration"] + design_columns(dim) + list(TRACE_FIELDS))
        for record in state.trace:
            writer.writerow(
                [_fmt(record.iteration)]
                + [_fmt(x) for x in record.design]
                + [_fmt(record.j_hat), _fmt(record.u_hat), _fmt(record.v_hat)]
                + [_fmt(record.best_so_far)]
            )


def write_rate_study(study: RateStudy, path: str | Path = "-") -> None:
    """One row per rung: sample size, replicate mean and variance, bias, truth."""
    with open_output(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(RATE_FIELDS)
        for size, mean, variance, bias in zip(
            study.ladder, study.means, study.variances, study.bias
        ):
            writer.writerow([_fmt(size), _fmt(mean), _fmt(variance), _fmt(bias), _fmt(study.truth)])


def write_crs_study(study: CrsStudy, path: str | Path = "-") -> None:
    with open_output(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(design_columns(study.designs.shape[1]) + list(CRS_FIELDS))
        for xi, with_crs, without_crs in zip(study.designs, study.with_crs, study.without_crs):
            writer.writerow([_fmt(x) for x in xi] + [_fmt(with_crs), _fmt(without_crs)])

"""
Command-line interface for meanvar-oed.
"""

import argparse
import itertools
import logging
import sys
from typing import Any

import numpy as np

from .bayes_opt import BoConfig, run_bo
from .config import MODEL_NAMES, RunConfig, create_problem, load_obstacles, load_run_config
from .convergence import ESTIMATOR_TAGS, crs_smoothness_study, run_rate_study
from .diffusion import PdeConfig, build_surrogate
from .errors import ConfigurationError, MeanVarOedError
from .estimators import EstimatorConfig, estimate_objective, resolve_bank
from .problem import ProblemDefinition
from .reports import write_crs_study, write_rate_study, write_reports, write_trace
from .utils import (
    CANDIDATE_STREAM,
    DESIGN_STREAM,
    derive_seed,
    parse_float_list,
    parse_int_list,
    stream,
)

logger = logging.getLogger(__name__)

MAX_SWEEP_ROWS = 100_000
MAX_RANDOM_BATCHES = 1000
EXIT_IO = 4


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Nested config values from the flags that were given."""
    def get(name: str):
        return getattr(args, name, None)

    return {
        "model": {
            "name": get("model"),
            "obstacles": get("obstacles"),
            "surrogate_cache": get("surrogate_cache"),
        },
        "estimator": {
            "n": get("n"),
            "m1": get("m1"),
            "m2": get("m2"),
            "reuse": False if get("no_reuse") else None,
            "lambda": get("lam"),
            "crs_seed": get("crs_seed"),
            "workers": get("workers"),
        },
        "optimizer": {
            "n_init": get("init"),
            "budget": get("budget"),
            "kappa": get("kappa"),
            "acquisition": get("acquisition"),
        },
        "seed": get("seed"),
        "output": get("out"),
    }


def _setup(args: argparse.Namespace) -> tuple[RunConfig, ProblemDefinition, EstimatorConfig]:
    config = load_run_config(args.config, _overrides(args))
    problem = create_problem(config.require_model())
    estimator = EstimatorConfig.build(**config.estimator)
    return config, problem, estimator


def _sweep_designs(problem: ProblemDefinition, args: argparse.Namespace, seed: int) -> np.ndarray:
    domain = problem.domain
    if args.random is not None:
        if args.random < 1:
            raise ConfigurationError("--random needs a positive candidate count")
        rng = stream(seed, CANDIDATE_STREAM)
        kept: list[np.ndarray] = []
        for _ in range(MAX_RANDOM_BATCHES):
            for point in domain.from_unit(rng.uniform(size=(args.random, domain.dim))):
                if domain.is_feasible(point):
                    kept.append(point)
            if len(kept) >= args.random:
                return np.array(kept[: args.random])
        raise ConfigurationError(f"Found only {len(kept)} feasible random designs")

    counts = parse_int_list(args.grid or "")
    if not counts:
        raise ConfigurationError("Sweep needs a grid spec (--grid) or --random K")
    if len(counts) == 1:
        counts = counts * domain.dim
    if len(counts) != domain.dim or any(c < 1 for c in counts):
        raise ConfigurationError(f"Grid spec {counts} does not match design dimension {domain.dim}")
    rows = int(np.prod(counts))
    if rows > MAX_SWEEP_ROWS:
        raise ConfigurationError(f"Sweep of {rows} rows exceeds the cap of {MAX_SWEEP_ROWS}")
    axes = [
        np.linspace(lo, hi, c) if c > 1 else np.array([0.5 * (lo + hi)])
        for lo, hi, c in zip(domain.lower, domain.upper, counts)
    ]
    designs = np.array(list(itertools.product(*axes)))
    feasible = np.array([domain.is_feasible(xi) for xi in designs])
    if not feasible.all():
        logger.info(f"Skipping {int((~feasible).sum())} infeasible grid designs")
    return designs[feasible]


def cmd_estimate(args: argparse.Namespace) -> int:
    config, problem, estimator = _setup(args)
    xi = problem.check_design(parse_float_list(args.design))
    report = estimate_objective(problem, xi, estimator, seed=config.seed)
    write_reports([report], problem.domain.dim, config.output)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config, problem, estimator = _setup(args)
    designs = _sweep_designs(problem, args, config.seed)
    bank = resolve_bank(problem, estimator) if estimator.crs_seed is not None else None
    reports = [
        estimate_objective(
            problem, xi, estimator, seed=derive_seed(config.seed, DESIGN_STREAM, k), bank=bank
        )
        for k, xi in enumerate(designs)
    ]
    logger.info(f"Sweep evaluated {len(reports)} designs")
    write_reports(reports, problem.domain.dim, config.output)
    return 0


def cmd_optimize(args: argparse.Namespace) -> int:
    config, problem, estimator = _setup(args)
    bo_config = BoConfig.build(**config.optimizer)
    state = run_bo(problem, estimator.lam, bo_config, estimator, config.seed)
    write_trace(state, problem.domain.dim, config.output)
    print(
        f"best_design={','.join(repr(float(x)) for x in state.best_design)} "
        f"best_j_hat={state.best_value!r} skipped={state.skipped}",
        file=sys.stderr,
    )
    return 0


def _summary_stream(config: RunConfig):
    return sys.stderr if config.output == "-" else sys.stdout


def cmd_convergence(args: argparse.Namespace) -> int:
    config, problem, estimator = _setup(args)
    xi = problem.check_design(parse_float_list(args.design))
    study = run_rate_study(
        problem,
        xi,
        args.estimator,
        parse_int_list(args.ladder),
        replicates=args.replicates,
        master_seed=config.seed,
        lam=estimator.lam,
        truth=args.truth,
        vary=args.vary,
        fixed_n=estimator.n,
    )
    write_rate_study(study, config.output)
    print(study.summary(), file=_summary_stream(config))
    return 0


def cmd_crs_study(args: argparse.Namespace) -> int:
    config, problem, estimator = _setup(args)
    if problem.domain.dim != 1:
        raise ConfigurationError("The CRS study runs along a one-dimensional design grid")
    designs = np.linspace(problem.domain.lower[0], problem.domain.upper[0], args.grid)
    study = crs_smoothness_study(
        problem, estimator.lam, designs, estimator.n, config.seed, tag=args.estimator
    )
    write_crs_study(study, config.output)
    print(
        f"study={study.tag} N={study.n} tv_with_crs={study.tv_with!r} "
        f"tv_without_crs={study.tv_without!r}",
        file=_summary_stream(config),
    )
    return 0


def cmd_pde_table(args: argparse.Namespace) -> int:
    overrides = _overrides(args)
    # obstacles come from the flag directly; no model name is needed here
    overrides.pop("model")
    config = load_run_config(args.config, overrides)
    model = config.model
    pde_values = dict(model.pde) if model is not None else {}
    obstacles = args.obstacles or (model.obstacles if model is not None else None)
    if isinstance(obstacles, str):
        obstacles = load_obstacles(obstacles)
    if obstacles:
        pde_values["obstacles"] = [tuple(o) for o in obstacles]
    resolution = args.lattice_resolution or (model.lattice_resolution if model else 21)
    pde = PdeConfig.build(**pde_values)
    table = build_surrogate(pde, resolution, cache_path=args.cache, workers=args.workers or 1)
    print(f"cache={args.cache} hash={pde.config_hash()} resolution={table.resolution}")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Path to a JSON run configuration")
    parser.add_argument("--seed", type=int, help="Master seed (default: 0)")
    parser.add_argument("--out", help="Output CSV path, '-' for stdout (default: -)")
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default="WARNING",
        help="Logging level for stderr (default: WARNING)",
    )


def _add_model(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", choices=MODEL_NAMES, help="Named design problem")
    parser.add_argument("--obstacles", help="JSON obstacle file for diffusion models")
    parser.add_argument("--surrogate-cache", help="Surrogate table cache file")
    parser.add_argument("--lambda", dest="lam", type=float, help="Variance penalty lambda")
    parser.add_argument("--n", type=int, help="Outer sample count N")
    parser.add_argument("--m1", type=int, help="Inner sample count M1 (needs --no-reuse)")
    parser.add_argument("--m2", type=int, help="Inner sample count M2 (needs --no-reuse)")
    parser.add_argument("--no-reuse", action="store_true", help="Draw independent inner samples")
    parser.add_argument("--crs-seed", type=int, help="Share one sample bank across designs")
    parser.add_argument("--workers", type=int, help="Threads for outer-sample blocks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Mean-variance Bayesian optimal experimental design"
    )
    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    estimate_parser = subparsers.add_parser("estimate", help="Estimate J_lambda at one design")
    _add_common(estimate_parser)
    _add_model(estimate_parser)
    estimate_parser.add_argument("--design", required=True, help="Design, e.g. 0.2 or 0.2,0.8")

    sweep_parser = subparsers.add_parser("sweep", help="Estimate J_lambda over a design grid")
    _add_common(sweep_parser)
    _add_model(sweep_parser)
    sweep_parser.add_argument("--grid", help="Points per design dimension, e.g. 61 or 9,9")
    sweep_parser.add_argument("--random", type=int, help="Evaluate K seeded random designs")

    optimize_parser = subparsers.add_parser("optimize", help="Maximize J_lambda by BO")
    _add_common(optimize_parser)
    _add_model(optimize_parser)
    optimize_parser.add_argument("--budget", type=int, help="BO iterations T")
    optimize_parser.add_argument("--init", type=int, help="Initial designs n0")
    optimize_parser.add_argument("--kappa", type=float, help="UCB exploration weight")
    optimize_parser.add_argument("--acquisition", choices=["ucb", "ei"], help="Acquisition rule")

    convergence_parser = subparsers.add_parser("convergence", help="Replicate rate study")
    _add_common(convergence_parser)
    _add_model(convergence_parser)
    convergence_parser.add_argument("--design", required=True, help="Design to study")
    convergence_parser.add_argument(
        "--estimator", choices=ESTIMATOR_TAGS, default="v", help="Estimate to study (default: v)"
    )
    convergence_parser.add_argument(
        "--ladder", default="100,316,1000,3162,10000", help="Comma-separated sample sizes"
    )
    convergence_parser.add_argument("--replicates", type=int, default=10, help="Replicates per rung")
    convergence_parser.add_argument(
        "--vary", choices=["N", "M1"], default="N", help="Sample size on the ladder (default: N)"
    )
    convergence_parser.add_argument("--truth", type=float, help="Reference value for the bias")

    crs_parser = subparsers.add_parser("crs-study", help="Curve roughness with and without CRS")
    _add_common(crs_parser)
    _add_model(crs_parser)
    crs_parser.add_argument("--grid", type=int, default=61, help="Design grid points (default: 61)")
    crs_parser.add_argument(
        "--estimator", choices=ESTIMATOR_TAGS, default="v", help="Estimate to compare (default: v)"
    )

    pde_parser = subparsers.add_parser("pde-table", help="Build and cache the surrogate table")
    _add_common(pde_parser)
    pde_parser.add_argument("--cache", required=True, help="Output cache file")
    pde_parser.add_argument("--lattice-resolution", type=int, help="Lattice points per axis")
    pde_parser.add_argument("--obstacles", help="JSON obstacle file")
    pde_parser.add_argument("--workers", type=int, help="Threads for lattice solves")

    subparsers.add_parser("version", help="Print version information")
    return parser


COMMANDS = {
    "estimate": cmd_estimate,
    "sweep": cmd_sweep,
    "optimize": cmd_optimize,
    "convergence": cmd_convergence,
    "crs-study": cmd_crs_study,
    "pde-table": cmd_pde_table,
}


def run(argv: list[str] | None = None) -> int:
    """Parse ``argv``, run the command and return its exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "version":
        from ._version import __version__

        print(f"meanvar-oed v{__version__}")
        return 0
    if not args.command:
        parser.print_help()
        return 2

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.captureWarnings(True)

    try:
        return COMMANDS[args.command](args)
    except MeanVarOedError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_IO


def main():
    """Main entry point for the CLI."""
    sys.exit(run())


if __name__ == "__main__":
    main()

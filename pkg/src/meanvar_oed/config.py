"""
Run configuration: one JSON file plus command-line overrides.

The file has sections ``model``, ``estimator`` and ``optimizer`` and the
top-level keys ``seed`` and ``output``. Values are merged in the order
defaults, file, overrides; the merged document is validated by pydantic.
"""

import json
import logging
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .benchmarks import (
    LinearGaussianSpec,
    NonlinearSpec,
    linear_gaussian_problem,
    nonlinear_problem,
)
from .diffusion import BUILDING_LAYOUTS, PdeConfig, build_surrogate, source_problem
from .errors import ConfigurationError, DimensionError
from .problem import ProblemDefinition

logger = logging.getLogger(__name__)

MODEL_NAMES = (
    "lingauss-1d",
    "nonlinear-1d",
    "nonlinear-2d",
    "source-1s",
    "source-2s",
    "building-4",
    "building-5",
)

DIFFUSION_SENSORS = {"source-1s": 1, "source-2s": 2, "building-4": 1, "building-5": 2}

DEFAULT_CONFIG: dict[str, Any] = {
    "estimator": {"n": 1000},
    "optimizer": {},
    "seed": 0,
    "output": "-",
}


class GaussianPriorSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["gaussian"]
    mean: float = 0.0
    variance: float = Field(gt=0)


class UniformPriorSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["uniform"]
    low: float = 0.0
    high: float = 1.0


PriorSettings = Annotated[
    Union[GaussianPriorSettings, UniformPriorSettings], Field(discriminator="kind")
]

Obstacle = tuple[float, float, float, float]


class ModelSettings(BaseModel):
    """The ``model`` section: which problem to build and its overrides."""

    model_config = ConfigDict(extra="forbid")

    name: str
    noise_variance: Optional[float] = Field(default=None, gt=0)
    design_lower: Optional[float] = None
    design_upper: Optional[float] = None
    prior: Optional[PriorSettings] = None
    dims: Optional[tuple[int, int, int]] = None
    sensors: Optional[int] = Field(default=None, ge=1)
    obstacles: Union[list[Obstacle], str, None] = None
    lattice_resolution: int = Field(default=21, ge=11)
    surrogate_cache: Optional[str] = None
    surrogate_workers: int = Field(default=1, ge=1)
    pde: dict[str, Any] = Field(default_factory=dict)


class RunConfig(BaseModel):
    """A complete run: model, estimator and optimizer settings, seed and output."""

    model_config = ConfigDict(extra="forbid")

    model: Optional[ModelSettings] = None
    estimator: dict[str, Any] = Field(default_factory=dict)
    optimizer: dict[str, Any] = Field(default_factory=dict)
    seed: int = Field(default=0, ge=0, lt=2**64)
    output: str = "-"

    def require_model(self) -> ModelSettings:
        if self.model is None:
            raise ConfigurationError("Missing required key 'model.name'")
        return self.model


def _merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    """Recursive dict merge; ``None`` in ``update`` leaves ``base`` untouched."""
    merged = dict(base)
    for key, value in update.items():
        if value is None:
            continue
        if isinstance(value, dict):
            existing = merged.get(key)
            section = _merge(existing if isinstance(existing, dict) else {}, value)
            if section or key in merged:
                merged[key] = section
        else:
            merged[key] = value
    return merged


def _describe(error: ValidationError) -> str:
    issues = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"])
        issues.append(f"'{location}': {item['msg']}")
    return "; ".join(issues)


def load_run_config(
    config_path: str | Path | None = None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """
    Load a run configuration.

    Args:
        config_path: Optional JSON configuration file.
        overrides: Values from command-line flags, nested like the file.

    Returns:
        The validated RunConfig.

    Raises:
        ConfigurationError: If the file is missing or malformed, or the merged
            configuration is invalid.
    """
    config = dict(DEFAULT_CONFIG)
    if config_path is not None:
        try:
            with open(config_path) as f:
                file_config = json.load(f)
        except FileNotFoundError as e:
            raise ConfigurationError(f"Config file {config_path} does not exist") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {config_path} is not valid JSON: {e}") from e
        if not isinstance(file_config, dict):
            raise ConfigurationError(f"Config file {config_path} must hold a JSON object")
        config = _merge(config, file_config)
        logger.debug(f"Loaded configuration from {config_path}")

    config = _merge(config, overrides or {})
    model = config.get("model")
    if isinstance(model, dict) and "name" not in model:
        raise ConfigurationError("Missing required key 'model.name'")
    try:
        return RunConfig.model_validate(config)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {_describe(e)}") from e


def load_obstacles(path: str | Path) -> list[Obstacle]:
    """
    Read an obstacle file.

    The file is JSON: a list of ``[xmin, xmax, ymin, ymax]`` rectangles or of
    objects with those keys, optionally wrapped as ``{"obstacles": [...]}``.
    """
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Obstacle file {path} is not valid JSON: {e}") from e
    if isinstance(data, dict):
        data = data.get("obstacles", [])
    rectangles = []
    try:
        for entry in data:
            if isinstance(entry, dict):
                entry = (entry["xmin"], entry["xmax"], entry["ymin"], entry["ymax"])
            xmin, xmax, ymin, ymax = (float(v) for v in entry)
            rectangles.append((xmin, xmax, ymin, ymax))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigurationError(f"Malformed obstacle entry in {path}: {e}") from e
    return rectangles


def _benchmark_problem(settings: ModelSettings) -> ProblemDefinition:
    values: dict[str, Any] = {}
    if settings.noise_variance is not None:
        values["noise_var"] = settings.noise_variance
    if settings.design_lower is not None:
        values["design_lower"] = settings.design_lower
    if settings.design_upper is not None:
        values["design_upper"] = settings.design_upper

    if settings.name == "lingauss-1d":
        if settings.prior is not None:
            if settings.prior.kind != "gaussian":
                raise ConfigurationError("lingauss-1d requires a gaussian prior")
            values.update(prior_mean=settings.prior.mean, prior_var=settings.prior.variance)
        return linear_gaussian_problem(LinearGaussianSpec(**values))

    if settings.prior is not None:
        if settings.prior.kind != "uniform":
            raise ConfigurationError(f"{settings.name} requires a uniform prior")
        values.update(prior_low=settings.prior.low, prior_high=settings.prior.high)
    values["design_dim"] = 1 if settings.name == "nonlinear-1d" else 2
    return nonlinear_problem(NonlinearSpec(**values))


def _diffusion_problem(settings: ModelSettings) -> ProblemDefinition:
    if settings.prior is not None or settings.design_lower is not None:
        raise ConfigurationError(f"{settings.name} has a fixed prior and design domain")
    obstacles = settings.obstacles
    if isinstance(obstacles, str):
        obstacles = load_obstacles(obstacles)
    if obstacles is None:
        obstacles = list(BUILDING_LAYOUTS.get(settings.name, ()))
    pde = PdeConfig.build(**_merge(settings.pde, {"obstacles": [tuple(o) for o in obstacles]}))
    table = build_surrogate(
        pde,
        settings.lattice_resolution,
        cache_path=settings.surrogate_cache,
        workers=settings.surrogate_workers,
    )
    sensors = settings.sensors or DIFFUSION_SENSORS[settings.name]
    kwargs = {"name": settings.name}
    if settings.noise_variance is not None:
        kwargs["noise_variance"] = settings.noise_variance
    return source_problem(table, sensors, **kwargs)


def create_problem(settings: ModelSettings) -> ProblemDefinition:
    """
    Build the named problem from its registered defaults and the overrides in
    ``settings``.

    Raises:
        ConfigurationError: For an unknown model name or invalid overrides.
        DimensionError: If ``settings.dims`` disagrees with the built problem.
    """
    if settings.name not in MODEL_NAMES:
        raise ConfigurationError(
            f"Unknown model '{settings.name}', expected one of {', '.join(MODEL_NAMES)}"
        )
    try:
        if settings.name in DIFFUSION_SENSORS:
            problem = _diffusion_problem(settings)
        else:
            problem = _benchmark_problem(settings)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid settings for '{settings.name}': {_describe(e)}") from e

    if settings.dims is not None and tuple(settings.dims) != problem.dims:
        raise DimensionError(
            f"Model '{settings.name}' has dims {problem.dims}, config says {tuple(settings.dims)}"
        )
    logger.info(f"Created problem '{problem.name}' with dims (d, p, n) = {problem.dims}")
    return problem

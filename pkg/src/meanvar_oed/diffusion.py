"""
Two-dimensional diffusion of a contaminant released by a Gaussian source.

The concentration G(z, t; theta) solves dG/dt = lap(G) + S(z; theta) on the
unit square with zero-flux walls, G = 0 at t = 0, and

    S(z; theta) = s / (2 pi h^2) exp(-|theta - z|^2 / (2 h^2)).

Space is discretized by cell-centred finite volumes; time by Strang-split
Crank-Nicolson (half step in x, full step in y carrying the source, half step
in x), each sweep being one banded solve over all grid lines at once.
Rectangular obstacles are rasterized to cells that hold zero concentration
and close their faces to flux.

The forward map used by the design problems is a ``SurrogateTable``: solver
fields on a lattice of source locations, interpolated bilinearly in the source
location and in the sensor position. Tables are cached on disk keyed by a
hash of the ``PdeConfig`` that produced them.
"""

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)
from scipy.linalg import LinAlgError, solve_banded

from .errors import ConfigurationError, EstimationError, SolverError, SurrogateCacheError
from .problem import (
    DesignDomain,
    GaussianNoiseModel,
    MaskedUniformPrior,
    ProblemDefinition,
    Rectangle,
)

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"MVOEDTB1"
HASH_BYTES = 64
MIN_LATTICE_RESOLUTION = 11
MIN_ACCESSIBLE_AREA = 0.1
SENSOR_NOISE_VARIANCE = 0.05**2

# Coordinates within this distance of a grid node are snapped onto it, so
# queries at nodes return stored values exactly.
NODE_SNAP = 1e-9

BUILDING_LAYOUTS: dict[str, tuple[tuple[float, float, float, float], ...]] = {
    "building-4": ((0.4, 0.6, 0.4, 0.6),),
    "building-5": ((0.2, 0.35, 0.55, 0.8), (0.6, 0.8, 0.2, 0.4)),
}


def validate_obstacles(obstacles: Sequence[Rectangle]) -> tuple[Rectangle, ...]:
    """
    Check that obstacles are non-degenerate, inside the unit square and disjoint.

    Raises:
        ConfigurationError: On the first offending rectangle.
    """
    rects = tuple(obstacles)
    for k, rect in enumerate(rects):
        if not (0.0 <= rect.xmin < rect.xmax <= 1.0 and 0.0 <= rect.ymin < rect.ymax <= 1.0):
            raise ConfigurationError(f"Obstacle {k} {rect} is empty or leaves the unit square")
        for j in range(k):
            if rect.overlaps(rects[j]):
                raise ConfigurationError(f"Obstacles {j} and {k} overlap")
    return rects


def _integer_ratio(numerator: float, denominator: float, what: str) -> int:
    count = int(round(numerator / denominator))
    if count < 1 or abs(count * denominator - numerator) > 1e-9 * max(1.0, numerator):
        raise ValueError(f"{what} must be an integer multiple of its step")
    return count


class PdeConfig(BaseModel):
    """Discretization, source and obstacle settings of the diffusion solver."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    dz: float = Field(default=0.01, gt=0, le=0.25)
    dt: float = Field(default=5e-4, gt=0)
    final_time: float = Field(default=0.16, gt=0)
    source_strength: float = 2.0
    source_width: float = Field(default=0.05, gt=0)
    obstacles: tuple[tuple[float, float, float, float], ...] = ()

    @field_validator("dz")
    @classmethod
    def _check_dz(cls, value: float) -> float:
        _integer_ratio(1.0, value, "The unit length")
        return value

    @field_validator("obstacles")
    @classmethod
    def _check_obstacles(cls, value):
        try:
            validate_obstacles([Rectangle(*r) for r in value])
        except ConfigurationError as e:
            raise ValueError(str(e)) from e
        return value

    @model_validator(mode="after")
    def _check_steps(self):
        _integer_ratio(self.final_time, self.dt, "The final time")
        return self

    @classmethod
    def build(cls, **values) -> "PdeConfig":
        """Construct a config, reporting validation failures as ConfigurationError."""
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid PDE configuration: {e}") from e

    @property
    def cells(self) -> int:
        return int(round(1.0 / self.dz))

    @property
    def steps(self) -> int:
        return _integer_ratio(self.final_time, self.dt, "The final time")

    @property
    def rectangles(self) -> tuple[Rectangle, ...]:
        return tuple(Rectangle(*r) for r in self.obstacles)

    def config_hash(self) -> str:
        """Hex SHA-256 of the canonical JSON form of this config."""
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()


def _node_stencil(coords: np.ndarray, count: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Lower node index and fractional offset for linear interpolation.

    ``coords`` are continuous indices into ``count`` nodes; they are clamped to
    the node range.
    """
    coords = np.clip(np.asarray(coords, dtype=np.float64), 0.0, count - 1.0)
    nearest = np.round(coords)
    coords = np.where(np.abs(coords - nearest) < NODE_SNAP, nearest, coords)
    lower = np.minimum(np.floor(coords).astype(np.int64), count - 2)
    return lower, coords - lower


def _cell_weights(points: np.ndarray, dz: float, cells: int, mask: np.ndarray):
    """
    Bilinear stencil over cell centres for each (x, y) point.

    Returns the (K, 4) x and y cell indices and the normalized weights, with
    obstacle cells removed from the stencil.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ix, fx = _node_stencil(points[:, 0] / dz - 0.5, cells)
    iy, fy = _node_stencil(points[:, 1] / dz - 0.5, cells)
    xs = np.stack([ix, ix + 1, ix, ix + 1], axis=1)
    ys = np.stack([iy, iy, iy + 1, iy + 1], axis=1)
    weights = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1
    )
    weights = np.where(mask[xs, ys], 0.0, weights)
    total = weights.sum(axis=1)
    if np.any(total <= 0):
        raise EstimationError("A query point has no accessible neighbouring cell")
    return xs, ys, weights / total[:, None]


@dataclass(frozen=True, eq=False)
class DiffusionField:
    """
    Concentration on the cell-centred grid at the final time.

    ``values[i, j]`` is the cell at x = (i + 1/2) dz, y = (j + 1/2) dz.
    Obstacle cells (``mask``) are held at zero.
    """

    values: np.ndarray
    mask: np.ndarray
    dz: float
    injected_mass: float

    @property
    def mass(self) -> float:
        return float(self.dz * self.dz * self.values[~self.mask].sum())

    def sample(self, points) -> np.ndarray:
        """Bilinear interpolation of cell-centre values at (K, 2) points."""
        xs, ys, weights = _cell_weights(points, self.dz, self.values.shape[0], self.mask)
        return np.sum(weights * self.values[xs, ys], axis=1)


class _LineOperator:
    """
    Finite-volume second difference along the rows of an (m, n) array.

    Rows are independent lines; a closed face has zero coefficient, which
    decouples neighbouring cells and, at row ends, neighbouring lines.
    """

    def __init__(self, coefficients: np.ndarray):
        self.coefficients = coefficients
        self.shape = (coefficients.shape[0], coefficients.shape[1] + 1)
        upper = np.zeros(self.shape)
        upper[:, :-1] = coefficients
        self._upper = upper.ravel()[:-1]
        diagonal = np.zeros(self.shape)
        diagonal[:, :-1] += coefficients
        diagonal[:, 1:] += coefficients
        self._diagonal = diagonal.ravel()
        self._banded: dict[float, np.ndarray] = {}

    def prepare(self, tau: float) -> None:
        """Assemble the banded form of (I - tau A) for later solves."""
        ab = np.zeros((3, self._diagonal.size))
        ab[0, 1:] = -tau * self._upper
        ab[1] = 1.0 + tau * self._diagonal
        ab[2, :-1] = -tau * self._upper
        self._banded[tau] = ab

    def apply(self, values: np.ndarray) -> np.ndarray:
        flux = self.coefficients * np.diff(values, axis=1)
        out = np.zeros_like(values)
        out[:, :-1] += flux
        out[:, 1:] -= flux
        return out

    def solve(self, rhs: np.ndarray, tau: float) -> np.ndarray:
        try:
            if tau not in self._banded:
                self.prepare(tau)
            solution = solve_banded((1, 1), self._banded[tau], rhs.ravel(), check_finite=False)
        except (LinAlgError, ValueError) as e:
            raise SolverError(f"Tridiagonal solve failed: {e}") from e
        return solution.reshape(self.shape)

    def crank_nicolson(self, values: np.ndarray, h: float, forcing=None) -> np.ndarray:
        """Advance dG/dt = A G + forcing by one Crank-Nicolson step of length h."""
        rhs = values + 0.5 * h * self.apply(values)
        if forcing is not None:
            rhs = rhs + h * forcing
        return self.solve(rhs, 0.5 * h)


class DiffusionSolver:
    """
    Reusable solver for one ``PdeConfig``.

    The obstacle mask and the banded matrices depend only on the config, so a
    solver instance can be shared between threads solving for different
    source locations.
    """

    def __init__(self, config: PdeConfig):
        self.config = config
        n = config.cells
        self.centres = (np.arange(n) + 0.5) * config.dz
        cx, cy = np.meshgrid(self.centres, self.centres, indexing="ij")
        self._cell_points = np.column_stack([cx.ravel(), cy.ravel()])
        mask = np.zeros(n * n, dtype=bool)
        for rect in config.rectangles:
            mask |= rect.contains(self._cell_points)
        self.mask = mask.reshape(n, n)
        self.mask.setflags(write=False)

        inv_dz2 = 1.0 / (config.dz * config.dz)
        open_x = (~self.mask[:-1, :] & ~self.mask[1:, :]) * inv_dz2
        open_y = (~self.mask[:, :-1] & ~self.mask[:, 1:]) * inv_dz2
        # x lines are the rows of values.T; y lines are the rows of values.
        self._x = _LineOperator(open_x.T.copy())
        self._y = _LineOperator(open_y)
        self._x.prepare(config.dt / 4.0)
        self._y.prepare(config.dt / 2.0)

    def source(self, theta) -> np.ndarray:
        """Gaussian source term on the cell centres, zero inside obstacles."""
        theta = np.asarray(theta, dtype=np.float64).reshape(2)
        h = self.config.source_width
        r2 = np.sum((self._cell_points - theta) ** 2, axis=1)
        values = self.config.source_strength / (2.0 * math.pi * h * h) * np.exp(-r2 / (2 * h * h))
        values = values.reshape(self.mask.shape)
        values[self.mask] = 0.0
        return values

    def step(self, values: np.ndarray, source: np.ndarray) -> np.ndarray:
        dt = self.config.dt
        values = self._x.crank_nicolson(values.T, 0.5 * dt).T
        values = self._y.crank_nicolson(values, dt, source)
        return self._x.crank_nicolson(values.T, 0.5 * dt).T

    def solve(self, theta, initial: np.ndarray | None = None) -> DiffusionField:
        """
        Integrate from ``initial`` (zero by default) to the final time.

        Raises:
            SolverError: If a linear solve fails or the field becomes non-finite.
        """
        config = self.config
        shape = self.mask.shape
        if initial is None:
            values = np.zeros(shape)
        else:
            values = np.array(initial, dtype=np.float64)
            if values.shape != shape:
                raise ConfigurationError(f"Initial field must have shape {shape}")
            values[self.mask] = 0.0
        source = self.source(theta)
        for _ in range(config.steps):
            values = self.step(values, source)
        if not np.all(np.isfinite(values)):
            raise SolverError(f"Diffusion solve produced non-finite values for theta={theta}")
        values = np.ascontiguousarray(values)
        values.setflags(write=False)
        injected = config.final_time * config.dz * config.dz * float(source.sum())
        return DiffusionField(values=values, mask=self.mask, dz=config.dz, injected_mass=injected)


def solve_diffusion(theta, config: PdeConfig | None = None, initial=None) -> DiffusionField:
    """
    Concentration field at the final time for a source at ``theta``.

    Args:
        theta: Source location (x, y) in the accessible region.
        config: Solver settings; defaults to ``PdeConfig()``.
        initial: Optional initial field on the cell grid.

    Returns:
        DiffusionField at ``config.final_time``.

    Raises:
        ConfigurationError: If theta lies outside the unit square or inside an obstacle.
        SolverError: If the time integration fails.
    """
    config = config or PdeConfig()
    theta = np.asarray(theta, dtype=np.float64).reshape(2)
    prior = MaskedUniformPrior(config.rectangles)
    if not prior.contains(theta)[0]:
        raise ConfigurationError(f"Source location {theta.tolist()} is not accessible")
    return DiffusionSolver(config).solve(theta, initial)


@dataclass(frozen=True, eq=False)
class SurrogateTable:
    """
    Solver fields on an R x R lattice of source locations over [0, 1]^2.

    ``fields[a, b]`` is the field for theta = (a, b) / (R - 1).
    """

    config: PdeConfig
    fields: np.ndarray
    mask: np.ndarray

    @property
    def resolution(self) -> int:
        return self.fields.shape[0]

    @property
    def lattice(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.resolution)

    @property
    def blocked_nodes(self) -> np.ndarray:
        """(R, R) flags for lattice sources inside an obstacle; the prior never draws these."""
        grid = np.stack(np.meshgrid(self.lattice, self.lattice, indexing="ij"), axis=-1)
        blocked = np.zeros(self.fields.shape[:2], dtype=bool)
        for rect in self.config.rectangles:
            blocked |= rect.contains(grid.reshape(-1, 2)).reshape(blocked.shape)
        return blocked

    def sensor_table(self, sensors) -> np.ndarray:
        """Stored fields interpolated at each sensor, shape (R, R, S)."""
        xs, ys, weights = _cell_weights(sensors, self.config.dz, self.config.cells, self.mask)
        return np.einsum("abks,ks->abk", self.fields[:, :, xs, ys], weights)

    def evaluate(self, thetas, sensors) -> np.ndarray:
        """
        Bilinear interpolation in theta of the sensor table, shape (K, S).

        Corners at blocked lattice nodes get zero weight and the remaining
        weights are renormalized. A cell with every corner blocked falls back
        to plain bilinear weights.
        """
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        table = self.sensor_table(sensors)
        blocked = self.blocked_nodes
        r = self.resolution
        ia, fa = _node_stencil(thetas[:, 0] * (r - 1), r)
        ib, fb = _node_stencil(thetas[:, 1] * (r - 1), r)
        corners = [(ia, ib), (ia + 1, ib), (ia, ib + 1), (ia + 1, ib + 1)]
        weights = np.stack([(1 - fa) * (1 - fb), fa * (1 - fb), (1 - fa) * fb, fa * fb])
        if blocked.any():
            open_corners = np.stack([~blocked[a, b] for a, b in corners])
            masked = np.where(open_corners, weights, 0.0)
            total = masked.sum(axis=0)
            usable = total > 0
            weights = np.where(usable, masked / np.where(usable, total, 1.0), weights)
        return sum(w[:, None] * table[a, b] for w, (a, b) in zip(weights, corners))


def write_surrogate(table: SurrogateTable, path: str | Path) -> None:
    """
    Write ``table`` to a binary cache file.

    Layout: 8-byte magic, 64-byte ASCII config hash, R, nx, ny as
    little-endian int64, then the fields as little-endian float64.
    """
    r, _, nx, ny = table.fields.shape
    try:
        with open(path, "wb") as f:
            f.write(CACHE_MAGIC)
            f.write(table.config.config_hash().encode("ascii"))
            f.write(np.asarray([r, nx, ny], dtype="<i8").tobytes())
            f.write(np.ascontiguousarray(table.fields, dtype="<f8").tobytes())
    except OSError as e:
        raise SurrogateCacheError(f"Cannot write surrogate cache {path}: {e}") from e
    logger.info(f"Wrote surrogate table ({r}x{r}) to {path}")


def read_cache_header(path: str | Path) -> tuple[str, int, int, int]:
    """Return (config hash, R, nx, ny) from a cache file header."""
    try:
        with open(path, "rb") as f:
            header = f.read(len(CACHE_MAGIC) + HASH_BYTES + 24)
    except OSError as e:
        raise SurrogateCacheError(f"Cannot read surrogate cache {path}: {e}") from e
    if len(header) < len(CACHE_MAGIC) + HASH_BYTES + 24 or not header.startswith(CACHE_MAGIC):
        raise SurrogateCacheError(f"{path} is not a surrogate cache file")
    offset = len(CACHE_MAGIC)
    digest = header[offset : offset + HASH_BYTES].decode("ascii", errors="replace")
    r, nx, ny = np.frombuffer(header[offset + HASH_BYTES :], dtype="<i8")
    return digest, int(r), int(nx), int(ny)


def load_surrogate(path: str | Path, config: PdeConfig) -> SurrogateTable:
    """
    Load a cached table built with ``config``.

    Raises:
        SurrogateCacheError: If the file is unreadable, truncated, or was
            built with a different config.
    """
    digest, r, nx, ny = read_cache_header(path)
    if digest != config.config_hash():
        raise SurrogateCacheError(f"Surrogate cache {path} was built with a different config")
    if nx != config.cells or ny != config.cells:
        raise SurrogateCacheError(f"Surrogate cache {path} has grid {nx}x{ny}")
    offset = len(CACHE_MAGIC) + HASH_BYTES + 24
    try:
        data = np.fromfile(path, dtype="<f8", offset=offset)
    except OSError as e:
        raise SurrogateCacheError(f"Cannot read surrogate cache {path}: {e}") from e
    if data.size != r * r * nx * ny:
        raise SurrogateCacheError(f"Surrogate cache {path} is truncated")
    fields = data.astype(np.float64).reshape(r, r, nx, ny)
    fields.setflags(write=False)
    logger.info(f"Loaded surrogate table ({r}x{r}) from {path}")
    return SurrogateTable(config=config, fields=fields, mask=DiffusionSolver(config).mask)


def build_surrogate(
    config: PdeConfig | None = None,
    lattice_resolution: int = 21,
    cache_path: str | Path | None = None,
    workers: int = 1,
) -> SurrogateTable:
    """
    Tabulate solver fields over a lattice of source locations.

    A cache file at ``cache_path`` is reused when its header matches the
    config and resolution; otherwise the table is rebuilt and the file
    overwritten.

    Args:
        config: Solver settings.
        lattice_resolution: Lattice points per axis, at least 11.
        cache_path: Optional binary cache file.
        workers: Threads used to solve lattice points.

    Returns:
        The surrogate table.
    """
    config = config or PdeConfig()
    if lattice_resolution < MIN_LATTICE_RESOLUTION:
        raise ConfigurationError(
            f"Lattice resolution must be at least {MIN_LATTICE_RESOLUTION}, "
            f"got {lattice_resolution}"
        )
    if cache_path is not None and Path(cache_path).exists():
        try:
            table = load_surrogate(cache_path, config)
            if table.resolution == lattice_resolution:
                return table
            logger.warning(
                f"Surrogate cache {cache_path} has resolution {table.resolution}; rebuilding"
            )
        except SurrogateCacheError as e:
            logger.warning(f"{e}; rebuilding")

    solver = DiffusionSolver(config)
    lattice = np.linspace(0.0, 1.0, lattice_resolution)
    nodes = [(a, b) for a in range(lattice_resolution) for b in range(lattice_resolution)]
    logger.info(
        f"Building {lattice_resolution}x{lattice_resolution} surrogate table "
        f"({config.cells}x{config.cells} cells, {config.steps} steps)"
    )

    def run(node):
        a, b = node
        return solver.solve((lattice[a], lattice[b])).values

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            solved = list(pool.map(run, nodes))
    else:
        solved = [run(node) for node in nodes]

    fields = np.stack(solved).reshape(
        lattice_resolution, lattice_resolution, config.cells, config.cells
    )
    fields.setflags(write=False)
    table = SurrogateTable(config=config, fields=fields, mask=solver.mask)
    if cache_path is not None:
        write_surrogate(table, cache_path)
    return table


def surrogate_forward(table: SurrogateTable, theta, sensors) -> np.ndarray:
    """
    Observation means at ``sensors`` for one or many source locations.

    Returns a vector of length S for a single theta, else an (K, S) array.

    Raises:
        ConfigurationError: If a sensor lies inside an obstacle or off the square.
    """
    sensors = np.atleast_2d(np.asarray(sensors, dtype=np.float64))
    if sensors.shape[1] != 2:
        raise ConfigurationError("Sensor locations must be (x, y) pairs")
    if not np.all(MaskedUniformPrior(table.config.rectangles).contains(sensors)):
        raise ConfigurationError(f"Sensor set {sensors.tolist()} is not accessible")
    theta = np.asarray(theta, dtype=np.float64)
    means = table.evaluate(theta.reshape(-1, 2), sensors)
    return means[0] if theta.ndim == 1 else means


def masked_prior_sampler(obstacles: Sequence[Rectangle]) -> MaskedUniformPrior:
    """
    Uniform prior over the unit square minus ``obstacles``.

    Raises:
        ConfigurationError: If the obstacles are invalid or leave less than
            10% of the square accessible.
    """
    prior = MaskedUniformPrior(validate_obstacles(obstacles))
    if prior.accessible_area < MIN_ACCESSIBLE_AREA:
        raise ConfigurationError(
            f"Accessible area {prior.accessible_area:.3f} is below {MIN_ACCESSIBLE_AREA}"
        )
    return prior


def source_problem(
    table: SurrogateTable,
    sensor_count: int,
    noise_variance: float = SENSOR_NOISE_VARIANCE,
    name: str | None = None,
) -> ProblemDefinition:
    """
    Contaminant-source design problem: place ``sensor_count`` sensors.

    The design is (x1, y1, ..., xm, ym) in [0, 1]^(2m), the parameter is the
    source location with a uniform prior over the accessible region, and each
    sensor reports the final-time concentration plus Gaussian noise.
    """
    if sensor_count < 1:
        raise ConfigurationError("At least one sensor is required")
    prior = masked_prior_sampler(table.config.rectangles)

    def forward(thetas: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return surrogate_forward(table, thetas, xi.reshape(sensor_count, 2))

    def accessible(xi: np.ndarray) -> bool:
        return bool(np.all(prior.contains(np.reshape(xi, (sensor_count, 2)))))

    return ProblemDefinition(
        name=name or f"source-{sensor_count}s",
        prior=prior,
        forward=forward,
        noise=GaussianNoiseModel.iid(noise_variance, sensor_count),
        domain=DesignDomain([0.0] * (2 * sensor_count), [1.0] * (2 * sensor_count), accessible),
        metadata={
            "pde": table.config.model_dump(),
            "lattice_resolution": table.resolution,
        },
    )

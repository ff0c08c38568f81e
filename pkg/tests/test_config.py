import json
import math

import numpy as np
import pytest

from meanvar_oed.config import (
    ModelSettings,
    RunConfig,
    create_problem,
    load_obstacles,
    load_run_config,
)
from meanvar_oed.errors import ConfigurationError, DimensionError

from .conftest import COARSE_PDE


def _write(path, data):
    path.write_text(json.dumps(data))
    return path


def test_defaults():
    config = load_run_config()
    assert config.model is None
    assert config.estimator == {"n": 1000}
    assert (config.seed, config.output) == (0, "-")


def test_overrides_win_over_file(tmp_path):
    path = _write(
        tmp_path / "run.json",
        {"model": {"name": "lingauss-1d"}, "estimator": {"n": 500, "lambda": 1.0}, "seed": 3},
    )
    config = load_run_config(path, {"estimator": {"n": 200, "lambda": None}, "seed": 7})
    assert config.model.name == "lingauss-1d"
    assert config.estimator == {"n": 200, "lambda": 1.0}
    assert config.seed == 7


def test_missing_model_name(tmp_path):
    path = _write(tmp_path / "run.json", {"model": {"noise_variance": 2.0}})
    with pytest.raises(ConfigurationError, match="model.name"):
        load_run_config(path)
    with pytest.raises(ConfigurationError, match="model.name"):
        RunConfig().require_model()


def test_unset_overrides_do_not_create_sections():
    config = load_run_config(None, {"model": {"name": None, "obstacles": None}})
    assert config.model is None


@pytest.mark.parametrize(
    "content",
    ["{not json", "[1, 2]", json.dumps({"seed": -1}), json.dumps({"colour": "red"})],
)
def test_invalid_files(tmp_path, content):
    path = tmp_path / "run.json"
    path.write_text(content)
    with pytest.raises(ConfigurationError):
        load_run_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_config(tmp_path / "absent.json")


def test_load_obstacles_formats(tmp_path):
    plain = _write(tmp_path / "a.json", [[0.4, 0.6, 0.4, 0.6]])
    keyed = _write(
        tmp_path / "b.json",
        {"obstacles": [{"xmin": 0.1, "xmax": 0.2, "ymin": 0.3, "ymax": 0.4}]},
    )
    assert load_obstacles(plain) == [(0.4, 0.6, 0.4, 0.6)]
    assert load_obstacles(keyed) == [(0.1, 0.2, 0.3, 0.4)]
    bad = _write(tmp_path / "c.json", [{"xmin": 0.1}])
    with pytest.raises(ConfigurationError):
        load_obstacles(bad)


@pytest.mark.parametrize(
    "name, dims",
    [("lingauss-1d", (1, 1, 1)), ("nonlinear-1d", (1, 1, 1)), ("nonlinear-2d", (2, 1, 2))],
)
def test_create_benchmarks(name, dims):
    assert create_problem(ModelSettings(name=name)).dims == dims


def test_prior_override_changes_closed_form():
    settings = ModelSettings(
        name="lingauss-1d", prior={"kind": "gaussian", "mean": 0.0, "variance": 4.0}
    )
    problem = create_problem(settings)
    assert problem.exact_utility(np.array([1.0])) == pytest.approx(0.5 * math.log(5.0))


def test_wrong_prior_kind():
    settings = ModelSettings(name="nonlinear-1d", prior={"kind": "gaussian", "variance": 1.0})
    with pytest.raises(ConfigurationError):
        create_problem(settings)


def test_unknown_model_and_dimension_check():
    with pytest.raises(ConfigurationError):
        create_problem(ModelSettings(name="lingauss-3d"))
    with pytest.raises(DimensionError):
        create_problem(ModelSettings(name="nonlinear-2d", dims=(1, 1, 1)))


def test_create_diffusion_problem(tmp_path):
    settings = ModelSettings(
        name="building-4",
        pde=COARSE_PDE,
        lattice_resolution=11,
        surrogate_cache=str(tmp_path / "table.bin"),
    )
    problem = create_problem(settings)
    assert problem.dims == (2, 2, 1)
    assert not problem.domain.is_feasible(np.array([0.5, 0.5]))
    assert (tmp_path / "table.bin").exists()


def test_diffusion_obstacles_from_file(tmp_path):
    path = _write(tmp_path / "obstacles.json", [[0.1, 0.3, 0.1, 0.3]])
    settings = ModelSettings(
        name="source-2s", obstacles=str(path), pde=COARSE_PDE, lattice_resolution=11
    )
    problem = create_problem(settings)
    assert problem.dims == (4, 2, 2)
    assert not problem.domain.is_feasible(np.array([0.2, 0.2, 0.8, 0.8]))


def test_invalid_pde_settings():
    settings = ModelSettings(name="source-1s", pde={"dz": 0.03}, lattice_resolution=11)
    with pytest.raises(ConfigurationError):
        create_problem(settings)

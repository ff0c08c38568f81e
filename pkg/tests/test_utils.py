import numpy as np
import pytest

from meanvar_oed.errors import ConfigurationError, DimensionError, EstimationError, SolverError
from meanvar_oed.utils import (
    NOISE_STREAM,
    PRIOR_STREAM,
    check_seed,
    parse_float_list,
    parse_int_list,
    stream,
)


@pytest.mark.parametrize("seed", [-1, 2**64])
def test_check_seed_range(seed):
    with pytest.raises(ConfigurationError):
        check_seed(seed)


def test_check_seed_accepts_numpy_integers():
    assert check_seed(np.uint64(2**64 - 1)) == 2**64 - 1


def test_streams_are_reproducible_and_distinct():
    first = stream(5, PRIOR_STREAM).uniform(size=4)
    np.testing.assert_array_equal(first, stream(5, PRIOR_STREAM).uniform(size=4))
    assert not np.array_equal(first, stream(5, NOISE_STREAM).uniform(size=4))
    assert not np.array_equal(first, stream(5, PRIOR_STREAM, 1).uniform(size=4))


def test_parse_lists():
    assert parse_float_list(" 0.2, 0.8 ") == [0.2, 0.8]
    assert parse_int_list("100,316,,1000") == [100, 316, 1000]
    assert parse_int_list("") == []
    with pytest.raises(ConfigurationError, match="integer"):
        parse_int_list("10,1e3")


def test_exit_codes():
    assert DimensionError.exit_code == 2
    assert SolverError.exit_code == EstimationError.exit_code == 3
    assert issubclass(DimensionError, ConfigurationError)

import math

import numpy as np

from .errors import ConfigurationError

# Stream tags for deriving independent generators from one master seed.
PRIOR_STREAM = 0
NOISE_STREAM = 1
INNER_M1_STREAM = 2
INNER_M2_STREAM = 3
DESIGN_STREAM = 4
CANDIDATE_STREAM = 5
REPLICATE_STREAM = 6

LOG_2PI = math.log(2.0 * math.pi)


def check_seed(seed: int) -> int:
    """
    Validate a master seed.

    Args:
        seed: Candidate seed value.

    Returns:
        The seed as a plain int.

    Raises:
        ConfigurationError: If the seed is not a non-negative 64-bit integer.
    """
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ConfigurationError(f"Seed must be a non-negative 64-bit integer, got {seed}")
    return seed


def stream(master_seed: int, *path: int) -> np.random.Generator:
    """
    Return the generator for the sub-stream identified by ``path``.

    The same (master_seed, path) always yields the same generator state, and
    distinct paths yield statistically independent streams.
    """
    sequence = np.random.SeedSequence(check_seed(master_seed), spawn_key=tuple(path))
    return np.random.default_rng(sequence)


def derive_seed(master_seed: int, *path: int) -> int:
    """Derive a 64-bit child seed from a master seed and an index path."""
    sequence = np.random.SeedSequence(check_seed(master_seed), spawn_key=tuple(path))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def _parse_list(text: str, kind: type, what: str) -> list:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    try:
        return [kind(p) for p in parts]
    except ValueError as e:
        raise ConfigurationError(f"Cannot parse {what} list '{text}': {e}") from e


def parse_float_list(text: str) -> list[float]:
    """Parse a comma-separated list of floats such as ``"0.2,0.8"``."""
    return _parse_list(text, float, "number")


def parse_int_list(text: str) -> list[int]:
    """Parse a comma-separated list of integers such as ``"100,316,1000"``."""
    return _parse_list(text, int, "integer")

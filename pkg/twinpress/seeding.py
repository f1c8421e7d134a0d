"""Named random sub-streams derived from a single root seed."""

import zlib
from typing import Union

import numpy as np


def stream_key(name: Union[str, int]) -> int:
    if isinstance(name, int):
        return name
    return zlib.crc32(name.encode("utf-8"))


def derive_rng(seed: int, *names: Union[str, int]) -> np.random.Generator:
    """Create an independent generator for a named consumer.

    Args:
        seed: Root experiment seed
        *names: Stream path, e.g. ("traffic",) or ("attack-shuffle", round_idx)

    Returns:
        numpy Generator whose draws depend only on (seed, names)

    Notes:
        Adding a new consumer never perturbs the draws of existing ones.
    """
    entropy = [int(seed)] + [stream_key(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(entropy))

"""
CellBench - Random Stream Module
Named, versioned counter-based random substreams

Every random draw in the toolkit comes from a Philox4x64 generator keyed by
(seed, purpose, index...). A substream depends only on its key, so work split
across threads, or replayed alone, sees exactly the same numbers.
"""

from enum import IntEnum

import numpy as np

STREAM_NAME = "philox4x64-seedsequence"
STREAM_VERSION = 1

MAX_SEED = 2 ** 64 - 1


class Purpose(IntEnum):
    """First spawn-key component; keeps unrelated draws apart"""
    SIZE_FACTORS = 1
    COUNTS = 2
    TSNE_INIT = 3
    BOOTSTRAP = 4
    PCA = 5


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def substream(seed: int, purpose: Purpose, *index: int) -> np.random.Generator:
    """Generator for one (seed, purpose, index...) key"""
    key = (STREAM_VERSION, int(purpose)) + tuple(int(i) for i in index)
    sequence = np.random.SeedSequence(entropy=check_seed(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(sequence))


def describe() -> dict:
    """Stream identity for provenance blocks"""
    return {'name': STREAM_NAME, 'version': STREAM_VERSION,
            'numpy_bit_generator': 'Philox'}

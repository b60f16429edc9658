"""Deterministic seed derivation.

Every random stream in the package is a PCG64 generator built from a
``numpy.random.SeedSequence`` whose ``spawn_key`` carries the derivation
path, e.g. ``(seed, PATIENT, index)``.  SeedSequence hashes the entropy and
the key together, so streams for different keys are independent and the
result does not depend on the order in which streams are created.
"""

import numpy as np

# stream namespaces
POPULATION = 1
RENDER = 2
MACE = 3
SPLIT = 4
MEMBER = 5
BATCH = 6
INIT = 7
BOOTSTRAP = 8
FIT_SPLIT = 9
HEATMAP_SAMPLE = 10


def seed_sequence(seed, *keys):
    return np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                  spawn_key=tuple(int(k) for k in keys))


def derive_rng(seed, *keys):
    """Return an independent generator for ``(seed, *keys)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def derive_seed(seed, *keys):
    """Collapse ``(seed, *keys)`` into a fresh 64-bit integer seed."""
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0])

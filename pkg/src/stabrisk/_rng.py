"""Seed derivation.

Every random stream is a ``numpy.random.Philox`` (counter-based, 4x64 rounds=10)
keyed by a ``SeedSequence`` built from a root seed plus a spawn key.  Spawn keys
are tuples of CRC-32 stage tags and integer indices, so a stream depends only on
``(root seed, stage name, index...)`` and never on scheduling order.
"""

import zlib

import numpy as np


def stage_tag(name):
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(seed, *path):
    """SeedSequence for ``seed`` under a path of stage names / integer indices."""
    key = tuple(stage_tag(p) if isinstance(p, str) else int(p) for p in path)
    return np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=key)


def generator(seed, *path):
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *path)))


def derive_seed(seed, *path):
    """A 63-bit integer seed for a sub-stage, e.g. the seed of training run ``i``."""
    state = seed_sequence(seed, *path).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 32 | int(state[1])) & (2**63 - 1))

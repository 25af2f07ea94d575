"""Derivation of independent random streams from a single master seed.

Every source of randomness in a run is addressed by a fixed integer path
under the master seed (e.g. ``(CLIENT, 3)`` is client 3's sampling stream).
Streams are derived with ``numpy.random.SeedSequence`` spawn keys, which is
counter-based: adding a client or consuming one stream never perturbs any
other stream.
"""

from __future__ import annotations

import numpy as np

# Stream namespaces; a full path is (namespace, *indices).
DATA = 0
SERVER = 1
CLIENT = 2
INIT_ENCODER = 3
INIT_CLASSIFIER = 4
INIT_DOMAIN_CLS = 5
REPLICATE = 6


def seed_sequence(master_seed: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=tuple(path))


def stream(master_seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the given path under the master seed."""
    return np.random.default_rng(seed_sequence(master_seed, *path))


def derive_seed(master_seed: int, *path: int) -> int:
    """Integer sub-seed for APIs that take a plain seed."""
    return int(seed_sequence(master_seed, *path).generate_state(1)[0])

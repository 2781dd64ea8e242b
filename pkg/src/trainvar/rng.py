"""Named, splittable random streams.

Every source of randomness in the package goes through :func:`stream`, so a
run is fully determined by the integer seeds in its configuration. Streams
are Philox (counter-based) generators keyed by ``(seed, name)``; two
different names under the same seed are statistically independent.
"""

from __future__ import annotations

import zlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def _name_key(name: str) -> tuple[int, ...]:
    # crc32 per dotted component keeps the key stable across processes
    return tuple(zlib.crc32(part.encode("utf-8")) for part in name.split("."))


def stream(seed: int, name: str) -> np.random.Generator:
    """Return a fresh generator for the named stream under ``seed``."""
    seq = np.random.SeedSequence(entropy=int(seed) & SEED_MASK, spawn_key=_name_key(name))
    return np.random.Generator(np.random.Philox(seq))


def child_seed(seed: int, name: str) -> int:
    """Derive a 64-bit integer seed for a child computation."""
    seq = np.random.SeedSequence(entropy=int(seed) & SEED_MASK, spawn_key=_name_key(name))
    return int(seq.generate_state(1, dtype=np.uint64)[0])

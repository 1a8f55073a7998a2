"""Counter-derived random streams.

Every random draw in the package comes from a generator built by
:func:`stream`. A stream is identified by the root seed and a path of keys;
string keys are mapped to integers with CRC-32 so the derivation is
reproducible from any language::

    SeedSequence(entropy=root_seed, spawn_key=(crc32(k) if str else k for k in path))

Because the path, not the order of execution, determines the stream, results do
not depend on how work is scheduled across workers.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k: int | str) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    if k < 0:
        raise ValueError("stream keys must be non-negative")
    return int(k)


def seed_sequence(root: int, *path: int | str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root) & (2**64 - 1), spawn_key=tuple(_key(k) for k in path))


def stream(root: int, *path: int | str) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root, *path))


def derive_seed(root: int, *path: int | str) -> int:
    """A 32-bit integer seed for libraries that want an int ``random_state``."""
    return int(seed_sequence(root, *path).generate_state(1, dtype=np.uint32)[0])

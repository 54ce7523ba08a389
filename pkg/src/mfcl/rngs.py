"""Deterministic random-stream splitting.

Every source of randomness in a run is a child stream of one root seed:
stream(seed, label, *indices) builds a SeedSequence from the root seed, a
CRC32 hash of the label, and any integer indices. Streams are therefore
independent of the order in which components ask for them.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(seed, label, indices):
    # SeedSequence wants non-negative entropy words; indices (which may be -1
    # for the bootstrap net) are reduced modulo 2^32
    key = [int(seed) % 2**32, zlib.crc32(label.encode("utf-8"))]
    key.extend(int(i) % 2**32 for i in indices)
    return key


def stream(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Child generator for one component (e.g. stream(seed, "batch", task_i))."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(_key(seed, label, indices))))


def derived_seed(seed: int, label: str, *indices: int) -> int:
    """Stable integer sub-seed (for APIs that take a plain seed)."""
    ss = np.random.SeedSequence(_key(seed, label, indices))
    return int(ss.generate_state(1, np.uint64)[0])

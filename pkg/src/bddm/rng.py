"""Seed fan-out: every random stream is a pure function of (master seed, labels).

Labels are hashed to 64-bit integers with BLAKE2b and passed as the
``spawn_key`` of a :class:`numpy.random.SeedSequence`, so a stream never
depends on how many other streams were created before it.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str | int) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFFFFFFFFFF
    return int.from_bytes(hashlib.blake2b(str(label).encode(), digest_size=8).digest(), "little")


def seed_sequence(seed: int, *labels: str | int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_label_key(x) for x in labels))


def stream(seed: int, *labels: str | int) -> np.random.Generator:
    """Independent generator for ``(seed, *labels)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *labels)))


def per_row_normals(seed: int, label: str, count: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normals of ``shape`` for each of ``count`` rows, one stream per row."""
    out = np.empty((count, *shape))
    for i in range(count):
        out[i] = stream(seed, label, i).standard_normal(shape)
    return out

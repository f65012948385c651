"""Reproducible, splittable random streams keyed by (seed, role, index...).

Streams use the counter-based Philox generator seeded through
numpy's SeedSequence, so any (seed, role, index) tuple maps to the same
stream on every platform and process.
"""

from __future__ import annotations

import zlib

import numpy as np


def _as_ints(parts) -> tuple[int, ...]:
    out = []
    for p in parts:
        if isinstance(p, str):
            out.append(zlib.crc32(p.encode("utf-8")))
        else:
            out.append(int(p) & 0xFFFFFFFFFFFFFFFF)
    return tuple(out)


def rng_stream(*parts) -> np.random.Generator:
    """Independent generator for the given key tuple."""
    if not parts:
        raise ValueError("rng_stream needs at least one key part")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_as_ints(parts))))

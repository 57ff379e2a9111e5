"""Seeded random substreams.

Every random draw in a run comes from a generator keyed by the global seed
plus a path such as ``("sample", epoch, batch, layer)``. Two runs with the
same seed therefore consume identical streams no matter how batches are
scheduled.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_word(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    raise ValueError(f"substream key parts must be str or non-negative int, got {part!r}")


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Return an independent generator for ``(seed, *path)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    words = [int(seed)] + [_key_word(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(words))

"""Deterministic seed derivation.

Every random choice in the project flows from one root seed.  Child streams
are named, and the derivation is a hash, so adding a new consumer never shifts
the seeds of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 63) - 1


def child_seed(root: int, *path: object) -> int:
    """Seed for the named substream ``path`` under ``root``."""
    key = ":".join([str(int(root))] + [str(p) for p in path])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK


def rng_for(root: int, *path: object) -> np.random.Generator:
    return np.random.default_rng(child_seed(root, *path))

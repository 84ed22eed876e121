"""Deterministic seed derivation.

Every stochastic step draws from a ``numpy.random.Generator`` built from a
master seed plus a tuple of integer "path" components (tree index, fold
index, lag, window, ...). ``numpy.random.SeedSequence`` does the mixing, so
streams for distinct paths are independent and do not depend on the order in
which work is scheduled.
"""

from __future__ import annotations

import hashlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= SEED_MASK:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def text_key(text: str) -> int:
    """Stable 64-bit integer for a string (independent of PYTHONHASHSEED)."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def derive_seed(seed: int, *path: int | str) -> int:
    parts = [check_seed(seed)]
    for p in path:
        parts.append(text_key(p) if isinstance(p, str) else int(p) & SEED_MASK)
    return int(np.random.SeedSequence(parts).generate_state(2, np.uint32).view(np.uint64)[0])


def make_rng(seed: int, *path: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *path))

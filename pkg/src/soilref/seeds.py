"""Deterministic seed derivation.

All randomness in the project flows through numpy's PCG64 generator, seeded
through this module. Sub-seeds are derived by hashing (root seed, tag path)
with BLAKE2b, so per-sample / per-purpose streams are independent of each
other and of iteration order, and identical across platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *tags: object) -> int:
    """64-bit sub-seed for (root, tags), stable across runs and platforms."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode("ascii"))
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def make_rng(root: int, *tags: object) -> np.random.Generator:
    """PCG64 generator for the derived stream."""
    return np.random.Generator(np.random.PCG64(derive_seed(root, *tags)))

"""Seeded randomness.

All streams come from numpy's Philox counter-based generator, keyed by a
64-bit integer derived via SHA-256 from a root seed plus string tags. The
same (seed, tags) always yields the same stream on every platform.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *tags) -> int:
    """Stable 64-bit child seed for a named purpose."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for t in tags:
        h.update(b"/")
        h.update(str(t).encode())
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, *tags)))

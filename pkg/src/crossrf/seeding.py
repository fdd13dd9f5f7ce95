"""Deterministic named derivation of rng streams from one experiment seed.

Every random draw in the toolkit comes from a generator obtained here, so a
single seed reproduces the whole experiment tree regardless of execution
order (e.g., parallel capture synthesis).
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(part) -> int:
    digest = hashlib.blake2s(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed: int, *names) -> np.random.Generator:
    """Generator for the stream named by (seed, *names); order-independent."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(n) for n in names]
    return np.random.default_rng(entropy)

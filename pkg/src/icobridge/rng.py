"""Deterministic random-stream derivation.

Every stochastic component takes an explicit integer seed and derives its own
named substream, so runs are reproducible bit-for-bit and adding a consumer
never shifts the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(name: str) -> int:
    """Stable 64-bit key for a stream name.

    Uses blake2s, not Python's hash(), which is salted per process.
    """
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed: int, name: str) -> np.random.Generator:
    """Generator for the substream `name` of `seed`."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stream_key(name)])
    return np.random.default_rng(ss)

"""Deterministic, platform-independent RNG stream derivation.

Streams are keyed by (master seed, *string/int tags) hashed through
SHA-256, so parallel workers can draw independent randomness without
coordinating, and a stream never depends on consumption order elsewhere.
"""

from __future__ import annotations

import hashlib

import numpy as np


def seed_from(*parts) -> int:
    payload = "|".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:16], "little")


def derive_rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_from(*parts)))

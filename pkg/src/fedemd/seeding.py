"""Deterministic seed derivation.

Every random stream in the package is derived from a master seed plus a
string tag path, hashed with SHA-256. This keeps parallel workers off each
other's streams and makes every run replayable from its config alone.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: object) -> int:
    """Map an arbitrary tag tuple to a stable 64-bit seed."""
    text = "/".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(*parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))

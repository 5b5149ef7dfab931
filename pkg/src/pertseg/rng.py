"""Deterministic seed derivation.

Every random draw in the package flows from a single root seed. Independent
substreams are derived by hashing component names, so adding a new consumer
never shifts the draws seen by an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root_seed: int, *names: str) -> int:
    """Derive a 64-bit seed from a root seed and a component name path."""
    payload = "|".join([str(int(root_seed)), *names]).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


def substream(root_seed: int, *names: str) -> np.random.Generator:
    """A fresh generator for the named component."""
    return np.random.default_rng(derive_seed(root_seed, *names))


def hash_to_seed(*parts: str) -> int:
    """Stable 64-bit seed from arbitrary strings (no process salt)."""
    digest = hashlib.sha256("|".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")

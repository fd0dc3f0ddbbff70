"""Stable per-entity seed derivation.

Every random stream in a run is keyed by ``(master, component, entity, round)``
so results do not depend on execution order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, component: str, entity: int = 0, round_: int = 0) -> int:
    """64-bit seed from a SHA-256 digest of the key."""
    key = f"{int(master)}|{component}|{int(entity)}|{int(round_)}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def derive_rng(master: int, component: str, entity: int = 0, round_: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, component, entity, round_))

"""Order-independent seed derivation."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """A 63-bit seed that depends only on ``parts``, never on call order."""
    blob = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") >> 1


def derived_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))

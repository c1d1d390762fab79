"""Deterministic seed derivation.

Every random draw in the package flows through a numpy Generator created
here, so runs are reproducible across processes and platforms regardless
of PYTHONHASHSEED or torch's global RNG state.
"""

from __future__ import annotations

import hashlib

import numpy as np


def seed_from(*parts: int | str) -> int:
    """Derive a 63-bit seed from a sequence of context parts."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def rng_from(*parts: int | str) -> np.random.Generator:
    """A fresh PCG64 generator keyed by the given context parts."""
    return np.random.default_rng(seed_from(*parts))


def as_rng(seed_or_rng: int | np.random.Generator, *context: int | str) -> np.random.Generator:
    """Accept either an explicit generator or an integer seed plus context."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return rng_from(seed_or_rng, *context)

"""Deterministic seed derivation.

Python's builtin ``hash`` is salted per process, so every derived seed goes
through SHA-256 instead. Same parts -> same seed, across runs and platforms.
"""

import hashlib

import numpy as np


def stable_u64(*parts) -> int:
    """Stable 64-bit unsigned integer derived from ``parts``.

    Parts are joined by ``|`` after ``str()`` conversion, so callers should
    pass scalars/strings only (no floats with ambiguous repr).
    """
    joined = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(joined).digest()[:8], "big")


def derive_rng(*parts) -> np.random.Generator:
    """Fresh PCG64 generator keyed by ``parts``."""
    return np.random.default_rng(stable_u64(*parts))

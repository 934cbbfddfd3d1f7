"""Deterministic RNG derivation.

Every random draw in the package flows through ``derived_rng`` with a
tuple of context keys (seed, sample id, purpose tag, ...), so results are
independent of batch composition and call order, and reruns are bitwise
identical.  Strings are folded in via sha256, not ``hash``, which is
salted per process.
"""

import hashlib

import numpy as np


def _to_entropy(key):
    if isinstance(key, str):
        return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
    return int(key) % (2 ** 63)


def derived_rng(*keys):
    """A numpy Generator seeded from an ordered tuple of ints and strings."""
    if not keys:
        raise ValueError("derived_rng needs at least one key")
    return np.random.default_rng(np.random.SeedSequence([_to_entropy(k) for k in keys]))

"""Deterministic RNG derivation.

Every random draw in the package comes from a generator derived here, so a
run is a pure function of the root seed.  Derivation is stateless: the
stream for (seed, role, epoch, index) can be rebuilt at any time, which is
what makes mid-run checkpoint resume exact.
"""

import hashlib

import numpy as np


def derive_rng(*key) -> np.random.Generator:
    """Return a Generator keyed by a tuple of ints/strings.

    Python's builtin hash() is salted per process, so the key is digested
    with sha256 instead.
    """
    digest = hashlib.sha256(repr(key).encode("utf-8")).digest()
    entropy = int.from_bytes(digest[:16], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy))

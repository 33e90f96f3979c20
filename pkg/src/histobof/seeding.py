"""Deterministic seed derivation.

Every random stream in the package is a numpy ``Generator`` backed by PCG64.
Child seeds are derived with BLAKE2b over a canonical text encoding of the
parent seed and a list of tags, so they are identical on every platform and
Python version (unlike the builtin ``hash``).
"""

import hashlib

import numpy as np

U64_MASK = (1 << 64) - 1


def derive_seed(seed, *tags):
    """Return a 64-bit child seed for ``seed`` and an ordered tuple of tags."""
    text = "|".join([str(int(seed) & U64_MASK)] + [str(t) for t in tags])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed, *tags):
    if tags:
        seed = derive_seed(seed, *tags)
    return np.random.Generator(np.random.PCG64(int(seed) & U64_MASK))

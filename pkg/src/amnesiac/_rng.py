"""Counter-based random streams keyed by a seed and a path of labels."""

from __future__ import annotations

import hashlib

import numpy as np


def _word(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream path integers must be non-negative")
        return int(part)
    digest = hashlib.blake2b(str(part).encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def generator(seed: int, *path) -> np.random.Generator:
    """Philox generator for the stream ``(seed, *path)``.

    Streams with different paths are independent; the same (seed, path)
    always yields the same sequence.
    """
    seq = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(_word(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed: int, *path) -> int:
    """A 63-bit child seed, for handing to APIs that take a plain integer."""
    return int(generator(seed, "derive", *path).integers(0, 2**63 - 1))

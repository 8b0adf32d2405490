"""Structured random seeding.

Every random draw in an experiment comes from a seed derived from the run
seed plus a path of labels (arm, purpose, round, subject index). This makes
each component's stream independent of what else ran — adding or removing an
arm, or resuming mid-run, cannot shift anyone else's randomness — and it
makes resume bit-exact without serializing generator state. String labels
are mapped through CRC32, never the built-in ``hash`` (which is randomized
per process).
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["seed_for"]


def seed_for(*parts: int | str) -> np.random.SeedSequence:
    """Deterministic seed derived from a path of nonnegative ints and labels."""
    entropy = []
    for p in parts:
        if isinstance(p, str):
            entropy.append(zlib.crc32(p.encode("utf-8")))
        else:
            v = int(p)
            if v < 0:
                raise ValueError(f"seed components must be nonnegative, got {v}")
            entropy.append(v)
    return np.random.SeedSequence(entropy)

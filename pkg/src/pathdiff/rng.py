"""Seeded, splittable random streams.

Every stream is a numpy ``Generator`` driven by the Philox-4x64 counter-based
bit generator.  Streams are keyed by a root seed plus a tuple of integer
labels, hashed together through ``SeedSequence``; two different label tuples
give statistically independent streams, and the same tuple always reproduces
the same stream.  Data generation, gate noise and diffusion noise all derive
from one root seed this way.
"""

import zlib

import numpy as np

# stream labels
DATA = 1
TRAIN = 2
SAMPLE = 3
INIT = 4
GATE = 5
ROUTE = 6


def make_rng(seed, *labels):
    """Return a Philox generator for ``(seed, *labels)``."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for lab in labels:
        if isinstance(lab, str):
            lab = zlib.crc32(lab.encode())
        key.append(int(lab) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def split(rng, n):
    """Derive ``n`` child generators from ``rng`` without sharing state."""
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence(int(s)))) for s in seeds]

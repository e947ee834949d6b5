"""Named random sub-streams derived from one 64-bit seed.

``substream(seed, "sampler/train")`` always yields the same generator for the
same seed and name, independently of what other streams were consumed, so
module-level determinism composes.
"""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))


def child_seed(seed: int, name: str) -> int:
    """A plain integer seed for APIs that take one (e.g. per-pair generation)."""
    return int(substream(seed, name).integers(0, 2**63 - 1))

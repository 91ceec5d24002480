"""Named, keyed random streams derived from one master seed.

A stream is identified by ``(seed, name, *keys)``; the same identity always
yields the same generator regardless of what other streams were consumed.
"""

import zlib

import numpy as np


def _word(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) % 2**64
    return zlib.crc32(str(key).encode("utf-8"))


def stream(seed: int, name: str, *keys) -> np.random.Generator:
    entropy = [_word(seed), _word(name)] + [_word(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))

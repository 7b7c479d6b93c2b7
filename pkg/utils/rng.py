"""
Counter-based random substreams.

Every random draw in the project comes from a generator keyed by a tuple of
non-negative integers (seed, purpose, session, round, ...). Philox is
counter-based, so a key always yields the same stream regardless of which
thread asks for it or in what order.
"""
import zlib

import numpy as np

from errors import DomainError

# Purpose tags keep streams for different jobs apart even when the other
# key fields coincide.
PURPOSE_INIT = 1
PURPOSE_DATA = 2
PURPOSE_SHUFFLE = 3
PURPOSE_TRAIN = 4
PURPOSE_CHANNEL = 5
PURPOSE_EVAL = 6


def substream(*key):
    """Generator for the given integer key; identical keys give identical streams."""
    words = [int(k) for k in key]
    if any(w < 0 for w in words):
        raise DomainError(f"rng key entries must be non-negative, got {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def name_tag(name):
    """Stable integer tag for a string (layer ids, stage names)."""
    return zlib.crc32(name.encode('utf-8'))

"""Deterministic named random substreams.

Every source of randomness in a run is derived from the single config
seed plus a name path (coseg, sampling, paste, init, ...), so any stage
can be replayed in isolation.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed, *names):
    """Generator for the substream addressed by `names` under `seed`."""
    key = tuple(_key(n) for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))

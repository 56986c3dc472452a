"""Named, counter-based random substreams.

Every consumer (weight init of one layer, one dropout site, the epoch shuffle,
one synthetic record, ...) draws from its own Philox stream keyed by
``(seed, *names)``. Adding a consumer never shifts the numbers seen by another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_words(names) -> list[int]:
    words = []
    for name in names:
        if isinstance(name, (int, np.integer)):
            words.append(int(name) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(name).encode("utf-8")))
    return words


def substream(seed: int, *names) -> np.random.Generator:
    """Return an independent generator for ``names`` under ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_name_words(names)))
    return np.random.Generator(np.random.Philox(ss))

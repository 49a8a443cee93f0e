"""Named, counter-based random substreams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent Philox stream for ``(seed, name, *extra)``.

    Streams with different names never overlap, so adding a consumer of
    randomness does not shift any other consumer's draws.
    """
    key = (zlib.crc32(name.encode()),) + tuple(int(e) for e in extra)
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))

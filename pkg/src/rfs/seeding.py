"""Named RNG substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``, e.g. ``substream(0, "env", 3)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))))

"""Named, independent seed streams.

Each stream is a ``numpy.random.SeedSequence`` keyed by the run seed, a
stable hash of the stream name and any extra integer keys (epoch, sample
index, ...).  Draws from one stream never shift the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class SeedStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)

    def rng(self, name: str, *keys: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(stream_key(name), *map(int, keys)))
        return np.random.default_rng(ss)

    def int_seed(self, name: str, *keys: int) -> int:
        """A 63-bit integer seed, e.g. for ``torch.manual_seed``."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(stream_key(name), *map(int, keys)))
        return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

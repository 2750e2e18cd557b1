"""Labelled random streams derived from one master seed.

Each consumer (parameter init, shuffling, peer sampling, ...) gets its own
generator, so adding or skipping a consumer never shifts another's draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(label.encode("utf-8"))])


class RngStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict = {}

    def __getitem__(self, label: str) -> np.random.Generator:
        if label not in self._streams:
            self._streams[label] = derive_rng(self.seed, label)
        return self._streams[label]

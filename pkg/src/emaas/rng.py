"""Named, independent random substreams derived from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def substream(seed: int, name: str) -> np.random.Generator:
    """A generator that depends only on ``(seed, name)``.

    Adding or consuming another stream never perturbs this one.
    """
    if not name:
        raise ValueError("stream name must be non-empty")
    seq = np.random.SeedSequence(entropy=seed & (2**64 - 1), spawn_key=(_name_key(name),))
    return np.random.Generator(np.random.PCG64(seq))


class Streams:
    """Caches one persistent generator per name."""

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = substream(self.seed, name)
        return self._streams[name]

    def fresh(self, name: str) -> np.random.Generator:
        """An uncached generator, for per-entity streams (e.g. one per job)."""
        return substream(self.seed, name)

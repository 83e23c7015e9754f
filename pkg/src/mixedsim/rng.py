"""Counter-based random streams.

Every stochastic draw in the package comes from a Philox generator whose key
is derived from ``(master seed, module tag, instance index...)``.  Streams for
different instances never overlap, so results do not depend on how work is
split across workers.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_int(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")


def stream_key(seed: int, tag: str, *index: int) -> np.ndarray:
    """Philox key (two 64-bit words) for a named stream."""
    seq = np.random.SeedSequence([int(seed) & _MASK64, _tag_int(tag), *[int(i) & _MASK64 for i in index]])
    return seq.generate_state(2, dtype=np.uint64)


def make_rng(seed: int, tag: str, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, tag, *index)))


def counter_rng(key: np.ndarray, counter: int) -> np.random.Generator:
    """Generator for sub-stream ``counter`` under a fixed key.

    The counter occupies the top word of Philox's 256-bit counter, leaving
    2**192 draws per sub-stream.
    """
    ctr = np.zeros(4, dtype=np.uint64)
    ctr[3] = np.uint64(int(counter) & _MASK64)
    return np.random.Generator(np.random.Philox(counter=ctr, key=key))

"""Deterministic RNG plumbing.

One run seed, many independent streams: every consumer asks for a stream by
(seed, *labels) and gets a counter-based Philox generator. Streams never
depend on call order or worker count, which is what makes run outputs
byte-identical for a fixed config+seed.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "spawn_key"]


def spawn_key(seed: int, *labels) -> int:
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest()[:16], "little")


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for the given seed and label path."""
    return np.random.Generator(np.random.Philox(key=spawn_key(seed, *labels)))

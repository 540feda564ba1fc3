"""Counter-based random streams.

Every stochastic component draws from its own Philox stream keyed by a
root seed plus a tuple of tags (typically a step index and a particle
index).  Streams are independent by construction, so results do not
depend on how work is partitioned across threads.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *tags) -> np.ndarray:
    """Derive a 2-word Philox key from a root seed and hashable tags.

    Uses SHA-256 rather than Python's hash() so keys are stable across
    processes and platforms.
    """
    material = repr((int(seed),) + tags).encode()
    digest = hashlib.sha256(material).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


def stream(seed: int, *tags) -> np.random.Generator:
    """A fresh generator on the stream identified by (seed, *tags)."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *tags)))

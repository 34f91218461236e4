"""Named deterministic random streams.

Every stochastic component draws from its own substream keyed by
(seed, *tags), so results do not depend on scheduling or on how many
draws other components consume.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_word(tag: object) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def substream(seed: int, *tags: object) -> np.random.Generator:
    """Return an independent generator for the stream named by ``tags``."""
    entropy = [int(seed) & _MASK64] + [_tag_word(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))

"""Named, order-independent random substreams.

Every consumer derives its own generator from (seed, *names), so the result
of any draw never depends on how many workers ran or in what order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(seed, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence([_key(seed)] + [_key(n) for n in names])


def stream(seed, *names) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *names)))


def derive_seed(seed, *names) -> int:
    return int(seed_sequence(seed, *names).generate_state(1, dtype=np.uint64)[0])

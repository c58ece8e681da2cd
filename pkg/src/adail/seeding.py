"""Named, counter-based random substreams derived from one run seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *counters: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, name, *counters)``.

    Adding a new consumer name never perturbs the draws of existing ones.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_key(name), *map(int, counters)))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, name: str, *counters: int) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_key(name), *map(int, counters)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

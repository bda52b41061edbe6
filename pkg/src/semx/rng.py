"""Named, reproducible random streams.

``stream(seed, "v2i", scene_id, vehicle_id, "fr")`` always yields the same
generator regardless of call order, so work units can run in any schedule.
"""

import hashlib

import numpy as np


def _key_int(key) -> int:
    digest = hashlib.sha256(repr(key).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(seed: int, *keys) -> int:
    h = hashlib.sha256(repr((int(seed),) + tuple(keys)).encode()).digest()
    return int.from_bytes(h[:8], "little")


def stream(seed: int, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))

"""Named, seeded random streams.

Every random draw in the package goes through :func:`stream`, which mixes a
64-bit seed with a tuple of keys (strings or integers) through splitmix64 and
hands the result to numpy's PCG64.  Two streams with different keys are
statistically independent; the same keys always give the same stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
    return int(key) & MASK64


def derive_seed(seed: int, *keys: int | str) -> int:
    state = splitmix64(int(seed) & MASK64)
    for key in keys:
        state = splitmix64(state ^ _key_to_int(key))
    return state


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))

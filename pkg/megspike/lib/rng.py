"""
Seeded random streams.

Every random draw in megspike comes from a numpy ``Generator`` backed by the
PCG64 bit generator. A single master seed is expanded into independent streams
with ``SeedSequence`` spawn keys, one per purpose (``"synth"``, ``"plan"``,
``"balance"``, ``"init"``, ``"dropout"`` ...) plus any integer coordinates such
as a patient index or a (repetition, fold) pair. String keys are mapped to
integers with CRC-32 so the derivation is stable across platforms and Python
versions.
"""

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, (bool, np.bool_)):
        raise TypeError("boolean keys are ambiguous")
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def seed_sequence(seed: int, *keys: Key) -> np.random.SeedSequence:
    """SeedSequence for the stream named by `keys` under master `seed`"""
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def derive_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Independent, reproducible generator for one purpose"""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def derive_seed(seed: int, *keys: Key) -> int:
    """63-bit integer seed for a sub-run (e.g. one cross-validation iteration)"""
    state = seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0]
    return int(state) & ((1 << 63) - 1)

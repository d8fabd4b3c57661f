"""Seed derivation for order-independent random streams."""
from __future__ import annotations

import hashlib

import numpy as np


def _key_words(key) -> list[int]:
    if isinstance(key, (bool, np.bool_)):
        return [int(key)]
    if isinstance(key, (int, np.integer)):
        v = int(key)
        if v < 0:
            raise ValueError(f"negative seed component {v}")
        words = []
        while True:
            words.append(v & 0xFFFFFFFF)
            v >>= 32
            if not v:
                return words
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return [int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:], "little")]


def derive_seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    """Seed sequence for ``(seed, *keys)``; strings are hashed, ints used verbatim."""
    entropy: list[int] = []
    for k in (seed, *keys):
        words = _key_words(k)
        entropy.append(len(words))
        entropy.extend(words)
    return np.random.SeedSequence(entropy)


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator whose state depends only on ``(seed, *keys)``.

    Used so that results never depend on evaluation order or worker count.
    """
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, *keys)))


def derive_int(seed: int, *keys) -> int:
    """A 63-bit integer seed derived from ``(seed, *keys)``."""
    state = derive_seed_sequence(seed, *keys).generate_state(2, np.uint32)
    return ((int(state[0]) << 32) | int(state[1])) & 0x7FFFFFFFFFFFFFFF

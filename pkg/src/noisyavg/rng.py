"""Deterministic, keyed random-number streams.

All randomness in the simulator flows through generators derived here.  A
stream is identified by a master seed plus a tuple of key fields (purpose
tag, learner index, round number, ...), so any execution order -- serial,
threaded, or multi-process -- produces identical draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream key fields must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        # Stable across runs and platforms (unlike hash()).
        digest = hashlib.blake2s(key.encode("utf-8"), digest_size=4).digest()
        return int.from_bytes(digest, "big")
    raise TypeError(f"stream key fields must be int or str, got {type(key).__name__}")


def derive(master_seed: int, *keys) -> np.random.Generator:
    """Return a fresh generator for the stream (master_seed, *keys)."""
    if master_seed < 0:
        raise ValueError("master_seed must be non-negative")
    entropy = [int(master_seed)] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(master_seed: int, *keys) -> int:
    """Derive a child master seed (for nested runs such as repetitions)."""
    return int(derive(master_seed, *keys).integers(0, 2**63))

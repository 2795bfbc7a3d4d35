"""Deterministic random-stream derivation.

Every random draw in the package comes from a generator derived here, so a
run is a pure function of its base seed: no module-level RNG state, and any
step of a run can be reproduced in isolation (which is what makes exact
resume-from-checkpoint possible).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key: int | str) -> int:
    if isinstance(key, bool):  # bool is an int subclass; reject to avoid silent surprises
        raise TypeError("seed keys must be int or str, not bool")
    if isinstance(key, int):
        return key & 0xFFFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"seed keys must be int or str, got {type(key).__name__}")


def derive_seed(base: int, *keys: int | str) -> int:
    """Collapse (base, *keys) into a single 63-bit seed, stable across runs."""
    ss = np.random.SeedSequence([_key_to_int(base)] + [_key_to_int(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def derive_rng(base: int, *keys: int | str) -> np.random.Generator:
    """Return a fresh Generator for the stream named by (base, *keys)."""
    ss = np.random.SeedSequence([_key_to_int(base)] + [_key_to_int(k) for k in keys])
    return np.random.default_rng(ss)

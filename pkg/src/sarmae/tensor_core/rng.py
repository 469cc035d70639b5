"""Seeded random streams.

All randomness comes from numpy's PCG64 bit generator. Independent streams
are derived from a root seed plus a key path (strings/ints) through
``SeedSequence`` spawn keys, so a stream depends only on ``(seed, keys)``
and never on the order in which other streams were consumed.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def make_rng(seed: int, *keys) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit integer seed for a sub-component."""
    return int(make_rng(seed, *keys).integers(0, 2**63 - 1))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0, dtype=np.float32):
    """Normal(0, std) truncated to +-bound*std by redrawing out-of-range samples."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)

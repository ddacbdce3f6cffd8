"""Seed derivation and random streams.

All randomness comes from numpy's Philox-4x64-10 counter-based generator,
keyed directly by a 64-bit seed (counter starts at zero). Child seeds are
the first 8 bytes (little-endian) of a BLAKE2b digest over the ``:``-joined
string forms of the parent seed and its labels, e.g.
``derive_seed(7, "P003", 2, "sagittal", 5)`` hashes ``b"7:P003:2:sagittal:5"``.
"""
from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(*parts) -> int:
    text = ":".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.blake2b(text, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & MASK64))

"""Deterministic counter-based random streams.

Every random draw in the package comes from a stream addressed by
``(seed, purpose, *indices)``.  Each address maps to an independent Philox
generator keyed by a hash of the address, so any subset of the work can run
in any order, or in parallel, and still produce the numbers a serial run
would produce.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _digest(seed: int, purpose: str, indices: tuple) -> bytes:
    tag = f"{int(seed)}|{purpose}|" + "|".join(str(int(i)) for i in indices)
    return hashlib.blake2b(tag.encode("ascii"), digest_size=16).digest()


def substream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Independent generator for the stream named (seed, purpose, *indices)."""
    key = np.frombuffer(_digest(seed, purpose, indices), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, purpose: str, *indices: int) -> int:
    """64-bit child seed for an independent unit of work (e.g. a replication)."""
    return int.from_bytes(_digest(seed, purpose, indices)[:8], "little")

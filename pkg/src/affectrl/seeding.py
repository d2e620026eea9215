"""Seed derivation: one master seed fans out into named, indexed streams."""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, name: str, index: int = 0) -> int:
    """Stable 63-bit seed for stream ``name`` / ``index`` under ``master``."""
    tag = int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")
    s = splitmix64((int(master) & _MASK) ^ tag)
    s = splitmix64(s ^ (int(index) & _MASK))
    return s >> 1


def rng_for(master: int, name: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, name, index))

"""Counter-based seed derivation: (master seed, purpose tag, index) -> Generator.

The tag is hashed with CRC32 (not ``hash()``, which is salted per process),
so derived streams are identical across processes and platforms.
"""
from __future__ import annotations

import zlib

import numpy as np


def tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def derive_seed(master: int, tag: str, index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master) & 0xFFFFFFFF, tag_code(tag), int(index)])


def derive_rng(master: int, tag: str, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, tag, index)))

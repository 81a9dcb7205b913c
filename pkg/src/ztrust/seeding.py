"""Seed splitting: every random stream is keyed by (master_seed, purpose, indices)."""
import hashlib
import struct

import numpy as np


def derive_seed(master_seed: int, purpose: str, *indices: int) -> int:
    h = hashlib.sha256(struct.pack("<Q", master_seed & 0xFFFFFFFFFFFFFFFF))
    h.update(purpose.encode())
    for i in indices:
        h.update(struct.pack("<q", i))
    return int.from_bytes(h.digest()[:8], "little")


def stream(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, purpose, *indices))

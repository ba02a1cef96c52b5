"""Order-independent child seeds derived from a master seed."""
import hashlib

import numpy as np


def derive_seed(master_seed, *keys) -> int:
    """hash64(master_seed, *keys) as an unsigned 64-bit integer."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master_seed)).encode())
    for k in keys:
        h.update(b"\x1f")
        h.update(str(k).encode())
    return int.from_bytes(h.digest(), "little")


def rng_for(master_seed, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *keys))

"""Counter-based random streams keyed by (seed, purpose, index).

Every consumer asks for ``stream(seed, tag, index)`` instead of threading a
single generator around, so results do not depend on call order or on how
work is split across processes.
"""
import hashlib

import numpy as np


def _key(seed: int, tag: str) -> np.ndarray:
    digest = hashlib.blake2b(f"{int(seed)}/{tag}".encode(), digest_size=16).digest()
    return np.frombuffer(digest, dtype="<u8").copy()


def stream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Independent Philox generator for one (seed, tag, index) triple.

    The index occupies the third counter word, so distinct indices never
    share counter blocks unless a single stream draws more than 2**128
    blocks.
    """
    if index < 0:
        raise ValueError("stream index must be non-negative")
    counter = np.array([0, 0, index & 0xFFFFFFFFFFFFFFFF, index >> 64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=_key(seed, tag), counter=counter))


def child_seed(seed: int, tag: str, index: int = 0) -> int:
    """Derive a 63-bit integer seed, e.g. for one ensemble member."""
    return int(stream(seed, tag, index).integers(0, 2**63 - 1))

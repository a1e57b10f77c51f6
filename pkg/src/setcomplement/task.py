"""The set complement task: sequences, targets and batch samplers.

Tokens are stored 0-based (``0..v-1``); the 1-based numbering is only a
documentation convention. A batch is an ``(N, s)`` integer array whose rows
are repetition-free.
"""
import json
import struct
from pathlib import Path

import numpy as np


class DegenerateInputError(ValueError):
    """Raised when a sequence leaves no token to predict or is malformed."""


def check_sequence(t, v: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if v < 2:
        raise DegenerateInputError(f"vocabulary size must be >= 2, got {v}")
    if t.ndim != 1 or t.size == 0:
        raise DegenerateInputError("a token sequence must be a non-empty 1-d array")
    if t.min() < 0 or t.max() >= v:
        raise DegenerateInputError(f"tokens must lie in 0..{v - 1}")
    if np.unique(t).size != t.size:
        raise DegenerateInputError("token sequence contains a repetition")
    return t


def legal_mask(t, v: int) -> np.ndarray:
    """Boolean mask of the tokens not present in ``t``."""
    mask = np.ones(v, dtype=bool)
    t = np.asarray(t, dtype=np.int64)
    if t.size:
        mask[check_sequence(t, v)] = False
    return mask


def legal_masks(batch: np.ndarray, v: int) -> np.ndarray:
    """Per-prefix legal masks for a batch, shape ``(N, s, v)``.

    Entry ``[i, k]`` is the mask after the prefix ``batch[i, :k+1]``.
    """
    batch = np.asarray(batch)
    n, s = batch.shape
    onehot = np.zeros((n, s, v), dtype=bool)
    onehot[np.arange(n)[:, None], np.arange(s)[None, :], batch] = True
    return ~np.logical_or.accumulate(onehot, axis=1)


def perfect_distribution(t, v: int) -> np.ndarray:
    """Uniform distribution over the tokens absent from ``t``."""
    t = check_sequence(t, v)
    if t.size >= v:
        raise DegenerateInputError("sequence covers the whole vocabulary; no token remains")
    mask = legal_mask(t, v)
    return mask / mask.sum()


def sample_sequences(v: int, s: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` uniform repetition-free sequences of length ``s``.

    Row-wise partial Fisher-Yates shuffle of ``0..v-1`` stopped after ``s``
    swaps.
    """
    if not 1 <= s <= v:
        raise DegenerateInputError(f"need 1 <= s <= v, got s={s}, v={v}")
    perm = np.tile(np.arange(v, dtype=np.int64), (n, 1))
    rows = np.arange(n)
    for i in range(s):
        j = rng.integers(i, v, size=n)
        swap = perm[rows, j]
        perm[rows, j] = perm[:, i]
        perm[:, i] = swap
    return perm[:, :s].copy()


def sample_sequence(v: int, s: int, rng: np.random.Generator) -> np.ndarray:
    return sample_sequences(v, s, 1, rng)[0]


def make_training_batch(v: int, s: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rows of length ``s + 1``; token ``k`` is the target for prefix ``:k``."""
    if s + 1 > v:
        raise DegenerateInputError(f"training length s+1={s + 1} exceeds v={v}")
    return sample_sequences(v, s + 1, n, rng)


def make_validation_batch(v: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return sample_sequences(v, v - 1, n, rng)


# -- serialization ---------------------------------------------------------

_HEADER = struct.Struct("<iii")


def write_batch_binary(path, batch: np.ndarray, v: int) -> None:
    batch = np.asarray(batch)
    n, s = batch.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(v, s, n))
        fh.write(batch.astype("<u2").tobytes())


def read_batch_binary(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    v, s, n = _HEADER.unpack_from(data)
    payload = np.frombuffer(data, dtype="<u2", offset=_HEADER.size, count=n * s)
    return payload.reshape(n, s).astype(np.int64), v


def write_batch_jsonl(path, batch: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in np.asarray(batch):
            fh.write(json.dumps([int(x) for x in row]) + "\n")


def read_batch_jsonl(path) -> np.ndarray:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return np.array(rows, dtype=np.int64)

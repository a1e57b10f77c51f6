"""TVD, ITP and ITR against the uniform-over-legal-tokens target.

All three are computed from a boolean *legal* mask, so the same code scores
set complement predictions (legal = tokens absent from the prefix) and
Othello predictions (legal = legal moves).
"""
import json

import numpy as np

from .model import next_token_distribution
from .task import DegenerateInputError, check_sequence, legal_mask, legal_masks

METRICS = ("tvd", "itp", "itr")


def tvd_masked(p: np.ndarray, legal: np.ndarray) -> np.ndarray:
    target = legal / legal.sum(axis=-1, keepdims=True)
    return 0.5 * np.abs(p - target).sum(axis=-1)


def itp_masked(p: np.ndarray, legal: np.ndarray) -> np.ndarray:
    return np.where(legal, 0.0, p).sum(axis=-1)


def itr_masked(logits: np.ndarray, legal: np.ndarray) -> np.ndarray:
    """1.0 where the argmax (lowest index on ties) is illegal."""
    top = np.argmax(logits, axis=-1)
    return (~np.take_along_axis(legal, top[..., None], axis=-1)[..., 0]).astype(np.float64)


def _sequence_mask(t, v: int) -> np.ndarray:
    t = check_sequence(t, v)
    if t.size >= v:
        raise DegenerateInputError("sequence covers the whole vocabulary")
    return legal_mask(t, v)


def tvd(p, t) -> float:
    p = np.asarray(p, dtype=np.float64)
    return float(tvd_masked(p, _sequence_mask(t, p.size)))


def itp(p, t) -> float:
    p = np.asarray(p, dtype=np.float64)
    return float(itp_masked(p, _sequence_mask(t, p.size)))


def itr(logits, t) -> int:
    logits = np.asarray(logits, dtype=np.float64)
    return int(itr_masked(logits, _sequence_mask(t, logits.size)))


def score(logits: np.ndarray, legal: np.ndarray) -> dict[str, float]:
    """Mean of each metric over all leading positions.

    Positions with no legal token (finished Othello games) are skipped.
    """
    legal = np.asarray(legal, dtype=bool)
    keep = legal.any(axis=-1)
    logits, legal = logits[keep], legal[keep]
    if logits.shape[0] == 0:
        raise ValueError("nothing to score: no position has a legal token")
    p = next_token_distribution(logits)
    return {
        "tvd": float(tvd_masked(p, legal).mean()),
        "itp": float(itp_masked(p, legal).mean()),
        "itr": float(itr_masked(logits, legal).mean()),
    }


def evaluate(predictor, batch, v: int) -> dict[str, float]:
    """Metrics averaged over rows and prefix lengths ``1..s``.

    ``predictor`` maps an ``(N, s)`` token array to ``(N, s, v)`` logits,
    entry ``[i, k]`` being the prediction after ``batch[i, :k+1]``.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.shape[1] > v - 1:
        raise DegenerateInputError(f"rows of length {batch.shape[1]} exceed v-1={v - 1}")
    logits = np.asarray(predictor(batch))
    if logits.shape != batch.shape + (v,):
        raise ValueError(f"predictor returned shape {logits.shape}, expected {batch.shape + (v,)}")
    return score(logits, legal_masks(batch, v))


def read_logit_file(path, v: int | None = None) -> tuple[list[list[int]], np.ndarray]:
    """Parse ``{"tokens": [...], "logits": [...]}`` lines."""
    tokens, logits = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            row = np.asarray(rec["logits"], dtype=np.float64)
            if v is not None and row.size != v:
                raise ValueError(f"{path}:{lineno}: expected {v} logits, got {row.size}")
            if not np.all(np.isfinite(row)):
                raise ValueError(f"{path}:{lineno}: non-finite logits")
            tokens.append([int(x) for x in rec["tokens"]])
            logits.append(row)
    if not logits:
        raise ValueError(f"{path}: no records")
    return tokens, np.stack(logits)


def evaluate_logit_file(path, v: int) -> dict[str, float]:
    """Score external set complement predictions against their prefixes."""
    tokens, logits = read_logit_file(path, v)
    legal = np.stack([_sequence_mask(t, v) for t in tokens])
    return score(logits, legal)

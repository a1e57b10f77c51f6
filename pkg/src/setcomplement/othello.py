"""Othello move generation and random-game corpora with legal-move masks.

Squares are bits ``row * 8 + col`` with row 0 = rank 1 and col 0 = file a.
The 60 playable squares map to tokens 0..59 in row-major order skipping the
centre squares d4, e4, d5, e5. A side without a legal move passes silently:
no token is emitted and the opponent moves again.

The shift kernels accept Python ints or ``uint64`` arrays, so the scalar
:class:`Board` API and the lockstep batch generator share one code path.
"""
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FULL = 0xFFFFFFFFFFFFFFFF
NOT_A = 0xFEFEFEFEFEFEFEFE
NOT_H = 0x7F7F7F7F7F7F7F7F

DARK, LIGHT = 0, 1
FILES = "abcdefgh"
CENTER = (27, 28, 35, 36)  # d4 e4 d5 e5
SQUARE_OF_TOKEN = [sq for sq in range(64) if sq not in CENTER]
TOKEN_OF_SQUARE = {sq: tok for tok, sq in enumerate(SQUARE_OF_TOKEN)}
N_TOKENS = 60


def square_name(sq: int) -> str:
    return f"{FILES[sq % 8]}{sq // 8 + 1}"


def square_of(name: str) -> int:
    return (int(name[1]) - 1) * 8 + FILES.index(name[0])


TOKEN_MAP_HASH = hashlib.sha256(",".join(square_name(s) for s in SQUARE_OF_TOKEN).encode()).digest()[:8]

_SHIFTS = (
    lambda b: (b << 1) & NOT_A & FULL,
    lambda b: (b >> 1) & NOT_H,
    lambda b: (b << 8) & FULL,
    lambda b: b >> 8,
    lambda b: (b << 9) & NOT_A & FULL,
    lambda b: (b << 7) & NOT_H & FULL,
    lambda b: (b >> 7) & NOT_A,
    lambda b: (b >> 9) & NOT_H,
)


def legal_squares(own, opp):
    """Bitmask of empty squares that bracket at least one opposing disc."""
    empty = ~(own | opp) & FULL
    moves = own & 0
    for shift in _SHIFTS:
        run = shift(own) & opp
        for _ in range(5):
            run |= shift(run) & opp
        moves |= shift(run)
    return moves & empty


def flipped(own, opp, move):
    """Discs flipped by placing ``move`` (a single-bit mask)."""
    flips = own & 0
    for shift in _SHIFTS:
        run = shift(move) & opp
        line = run
        for _ in range(5):
            run = shift(run) & opp
            line |= run
        flips |= line * ((shift(line) & own) != 0)
    return flips


def square_mask_to_tokens(mask):
    """Compress a 64-bit square mask to the 60-bit token mask."""
    low = mask & ((1 << 27) - 1)
    mid = (mask >> 2) & (((1 << 6) - 1) << 27)
    high = (mask >> 4) & (((1 << 27) - 1) << 33)
    return low | mid | high


def token_mask_to_bools(mask: int) -> np.ndarray:
    return np.array([(mask >> i) & 1 for i in range(N_TOKENS)], dtype=bool)


@dataclass(frozen=True)
class Board:
    dark: int
    light: int
    side: int = DARK
    terminal: bool = False

    def __post_init__(self):
        if self.dark & self.light:
            raise ValueError("occupancy masks overlap")

    @property
    def own(self) -> int:
        return self.dark if self.side == DARK else self.light

    @property
    def opp(self) -> int:
        return self.light if self.side == DARK else self.dark

    @property
    def discs(self) -> int:
        return (self.dark | self.light).bit_count()

    def counts(self) -> tuple[int, int]:
        return self.dark.bit_count(), self.light.bit_count()


def initial_board() -> Board:
    """Standard start: dark on d5 and e4, light on d4 and e5, dark to move."""
    return Board(dark=(1 << 35) | (1 << 28), light=(1 << 27) | (1 << 36), side=DARK)


def legal_moves(board: Board) -> set[int]:
    if board.terminal:
        return set()
    mask = legal_squares(board.own, board.opp)
    return {TOKEN_OF_SQUARE[sq] for sq in range(64) if mask >> sq & 1}


def legal_token_mask(board: Board) -> int:
    if board.terminal:
        return 0
    return square_mask_to_tokens(legal_squares(board.own, board.opp))


class IllegalMoveError(ValueError):
    pass


def apply_move(board: Board, token: int) -> Board:
    """Play ``token``; passes and game end are resolved before returning."""
    sq = SQUARE_OF_TOKEN[token]
    move = 1 << sq
    own, opp = board.own, board.opp
    if board.terminal or not legal_squares(own, opp) & move:
        raise IllegalMoveError(f"{square_name(sq)} is not legal here")
    flips = flipped(own, opp, move)
    own, opp = own | move | flips, opp & ~flips
    dark, light = (own, opp) if board.side == DARK else (opp, own)
    nxt = 1 - board.side
    mover_next = Board(dark, light, nxt)
    if legal_squares(mover_next.own, mover_next.opp):
        return mover_next
    if legal_squares(own, opp):
        return Board(dark, light, board.side)
    return Board(dark, light, nxt, terminal=True)


def replay(tokens) -> list[Board]:
    """Boards after each prefix, starting with the initial position."""
    boards = [initial_board()]
    for tok in tokens:
        boards.append(apply_move(boards[-1], int(tok)))
    return boards


def perft(board: Board, depth: int) -> int:
    """Number of token sequences of length ``depth`` playable from ``board``."""
    if depth == 0:
        return 1
    return sum(perft(apply_move(board, tok), depth - 1) for tok in legal_moves(board))


# -- random games ----------------------------------------------------------

@dataclass
class GameRecord:
    tokens: np.ndarray          # uint8 tokens
    masks: np.ndarray | None    # uint64 token masks after each prefix
    passed: bool = False

    def __len__(self) -> int:
        return len(self.tokens)


def othello_lengths(rng: np.random.Generator, n: int) -> np.ndarray:
    """Input sequence lengths ``floor(U[15, 60))``."""
    return np.floor(rng.uniform(15, 60, size=n)).astype(np.int64)


def sample_othello_hypers(rng: np.random.Generator) -> dict:
    """One draw of the OthelloGPT sweep hyperparameters."""
    return {
        "s": int(np.floor(rng.uniform(15, 60))),
        "attention_dropout": float(rng.uniform(0, 0.2)),
        "embed_dropout": float(rng.uniform(0, 0.5)),
        "resid_dropout": float(rng.uniform(0, 0.3)),
    }


def othello_sweep_config(runs: int = 100, seed: int = 0) -> dict:
    """Sweep manifest: per-run hyperparameter draws plus the shared 10 x 10 BEMA grid."""
    from .bema import grid_specs
    from .rng import stream

    rng = stream(seed, "othello-sweep")
    return {
        "seed": seed,
        "runs": [sample_othello_hypers(rng) for _ in range(runs)],
        "bema_grid": [s.as_dict() for s in grid_specs(10.0)],
        "batch_size": 256,
        "validate_every": 1000,
        "train_games": 10_000_000,
    }


def _kth_set_bit(masks: np.ndarray, k: np.ndarray) -> np.ndarray:
    bits = ((masks[:, None] >> np.arange(64, dtype=np.uint64)) & np.uint64(1)).astype(bool)
    return np.argmax(np.cumsum(bits, axis=1) > k[:, None], axis=1)


def generate_games(n: int, rng: np.random.Generator, lengths=None, with_masks: bool = True) -> list[GameRecord]:
    """``n`` uniformly random games, each truncated to its entry of ``lengths``.

    All games advance in lockstep; finished or truncated games stay frozen.
    """
    lengths = np.full(n, N_TOKENS) if lengths is None else np.asarray(lengths)
    if np.any(lengths > N_TOKENS) or np.any(lengths < 0):
        raise ValueError("lengths must lie in 0..60")
    start = initial_board()
    tokens = np.zeros((n, N_TOKENS), dtype=np.uint8)
    masks = np.zeros((n, N_TOKENS), dtype=np.uint64)
    played = np.zeros(n, dtype=np.int64)
    passed = np.zeros(n, dtype=bool)
    tok_of_sq = np.full(64, 255, dtype=np.uint8)
    tok_of_sq[SQUARE_OF_TOKEN] = np.arange(N_TOKENS)
    draws = rng.random((n, N_TOKENS))
    one = np.uint64(1)

    own = np.full(n, start.own, dtype=np.uint64)
    opp = np.full(n, start.opp, dtype=np.uint64)
    legal = legal_squares(own, opp)
    for ply in range(N_TOKENS):
        active = (ply < lengths) & (legal != 0)
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        a_own, a_opp, a_legal = own[idx], opp[idx], legal[idx]
        count = np.bitwise_count(a_legal).astype(np.int64)
        k = np.minimum((draws[idx, ply] * count).astype(np.int64), count - 1)
        sq = _kth_set_bit(a_legal, k)
        move = one << sq.astype(np.uint64)
        flips = flipped(a_own, a_opp, move)
        a_own = a_own | move | flips
        a_opp = a_opp & ~flips
        # opponent to move unless it must pass
        nxt_legal = legal_squares(a_opp, a_own)
        stay_legal = legal_squares(a_own, a_opp)
        must_pass = (nxt_legal == 0) & (stay_legal != 0)
        new_own = np.where(must_pass, a_own, a_opp)
        new_opp = np.where(must_pass, a_opp, a_own)
        new_legal = np.where(must_pass, stay_legal, nxt_legal)
        own[idx], opp[idx], legal[idx] = new_own, new_opp, new_legal
        passed[idx] |= must_pass
        tokens[idx, ply] = tok_of_sq[sq]
        masks[idx, ply] = square_mask_to_tokens(new_legal)
        played[idx] += 1

    return [
        GameRecord(tokens=tokens[i, :played[i]].copy(),
                   masks=masks[i, :played[i]].copy() if with_masks else None,
                   passed=bool(passed[i]))
        for i in range(n)
    ]


def random_game(rng: np.random.Generator, max_len: int = N_TOKENS) -> GameRecord:
    return generate_games(1, rng, [max_len])[0]


# -- corpus files ----------------------------------------------------------

CORPUS_MAGIC = b"OTHCORP1"
MASKS_MAGIC = b"OTHMASK1"
_FILE_HEADER = struct.Struct("<8sHI8s")
FORMAT_VERSION = 1


def generate_corpus(count: int, seed: int, out, masks_out=None, min_len: int = 15, max_len: int = 59,
                    no_pass_games: bool = False, chunk: int = 50_000) -> dict:
    """Write ``count`` games truncated to ``floor(U[min_len, max_len + 1))`` moves.

    Chunk ``i`` draws from its own stream, so output depends only on
    ``seed`` and the arguments. Returns summary statistics.
    """
    from .rng import stream

    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 <= min_len <= max_len <= N_TOKENS:
        raise ValueError("need 0 <= min_len <= max_len <= 60")
    games: list[GameRecord] = []
    index = 0
    while len(games) < count:
        rng = stream(seed, "othello-corpus", index)
        need = min(chunk, count - len(games)) if not no_pass_games else chunk
        lengths = np.floor(rng.uniform(min_len, max_len + 1, size=need)).astype(np.int64)
        batch = generate_games(need, rng, lengths, with_masks=masks_out is not None)
        if no_pass_games:
            batch = [g for g in batch if not g.passed]
        games.extend(batch[:count - len(games)])
        index += 1
    write_corpus(out, games)
    if masks_out is not None:
        write_masks(masks_out, games)
    lens = np.array([len(g) for g in games])
    return {"count": len(games), "mean_length": float(lens.mean()), "with_passes": int(sum(g.passed for g in games))}


def write_corpus(path, games: list[GameRecord]) -> None:
    with open(path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(CORPUS_MAGIC, FORMAT_VERSION, len(games), TOKEN_MAP_HASH))
        for g in games:
            fh.write(bytes([len(g)]))
            fh.write(np.asarray(g.tokens, dtype=np.uint8).tobytes())


def write_masks(path, games: list[GameRecord]) -> None:
    with open(path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(MASKS_MAGIC, FORMAT_VERSION, len(games), TOKEN_MAP_HASH))
        for g in games:
            fh.write(bytes([len(g)]))
            fh.write(np.asarray(g.masks, dtype="<u8").tobytes())


def _read(path, magic: bytes, itemsize: int, dtype: str) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    got, version, count, map_hash = _FILE_HEADER.unpack_from(data)
    if got != magic:
        raise ValueError(f"{path}: bad magic {got!r}")
    if version != FORMAT_VERSION or map_hash != TOKEN_MAP_HASH:
        raise ValueError(f"{path}: incompatible version or token map")
    out, pos = [], _FILE_HEADER.size
    for _ in range(count):
        n = data[pos]
        pos += 1
        out.append(np.frombuffer(data, dtype=dtype, count=n, offset=pos).copy())
        pos += n * itemsize
    return out


def read_corpus(path) -> list[np.ndarray]:
    return _read(path, CORPUS_MAGIC, 1, "u1")


def read_masks(path) -> list[np.ndarray]:
    return _read(path, MASKS_MAGIC, 8, "<u8")


def prefix_masks(corpus: list[np.ndarray], masks: list[np.ndarray]) -> dict[tuple, np.ndarray]:
    """Map each stored game prefix to its legal-token mask as a bool vector."""
    table = {}
    for toks, ms in zip(corpus, masks):
        for k in range(len(toks)):
            table[tuple(int(x) for x in toks[:k + 1])] = token_mask_to_bools(int(ms[k]))
    return table


def evaluate_predictions(logits_path, masks_path, corpus_path) -> dict:
    """Score ``{"tokens", "logits"}`` JSONL predictions against stored masks."""
    from .metrics import read_logit_file, score

    table = prefix_masks(read_corpus(corpus_path), read_masks(masks_path))
    tokens, logits = read_logit_file(logits_path, N_TOKENS)
    legal = []
    for lineno, toks in enumerate(tokens, 1):
        key = tuple(toks)
        if key not in table:
            raise KeyError(f"line {lineno}: prefix not found in corpus")
        legal.append(table[key])
    result = score(logits, np.stack(legal))
    result["positions"] = len(tokens)
    return result

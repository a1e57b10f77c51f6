import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from setcomplement import othello as oth
from setcomplement.rng import stream


def to_grid(board):
    side = None if board.terminal else (oracles.DARK if board.side == oth.DARK else oracles.LIGHT)
    return oracles.grid_from_bits(board.dark, board.light, side)


def random_positions(n, seed):
    """Boards reached by uniformly random play, with all intermediate states."""
    rng = stream(seed, "positions")
    out = []
    while len(out) < n:
        board = oth.initial_board()
        while not board.terminal and len(out) < n:
            out.append(board)
            moves = sorted(oth.legal_moves(board))
            board = oth.apply_move(board, moves[rng.integers(len(moves))])
    return out


def test_token_map():
    assert len(oth.SQUARE_OF_TOKEN) == 60
    assert [oth.square_name(s) for s in oth.SQUARE_OF_TOKEN[:3]] == ["a1", "b1", "c1"]
    assert oracles.TOKEN_CELLS == [divmod(s, 8) for s in oth.SQUARE_OF_TOKEN]
    for sq in range(64):
        if sq in oth.CENTER:
            continue
        assert oth.square_mask_to_tokens(1 << sq) == 1 << oth.TOKEN_OF_SQUARE[sq]
        arr = oth.square_mask_to_tokens(np.array([1 << sq], dtype=np.uint64))
        assert int(arr[0]) == 1 << oth.TOKEN_OF_SQUARE[sq]


def test_initial_board():
    b = oth.initial_board()
    assert b.discs == 4 and b.side == oth.DARK
    assert b.dark == (1 << oth.square_of("d5")) | (1 << oth.square_of("e4"))
    assert b.light == (1 << oth.square_of("d4")) | (1 << oth.square_of("e5"))
    names = {oth.square_name(oth.SQUARE_OF_TOKEN[t]) for t in oth.legal_moves(b)}
    assert names == {"d3", "c4", "f5", "e6"}
    assert oth.legal_moves(b) == oracles.GridBoard().legal()


def test_d3_flips_d4():
    b = oth.apply_move(oth.initial_board(), oth.TOKEN_OF_SQUARE[oth.square_of("d3")])
    assert b.counts() == (4, 1)
    assert b.side == oth.LIGHT
    assert b.dark >> oth.square_of("d4") & 1


def test_illegal_move_raises():
    with pytest.raises(oth.IllegalMoveError):
        oth.apply_move(oth.initial_board(), 0)


def test_no_flip_board_has_no_moves():
    b = oth.Board(dark=1 << 0, light=0)
    assert oth.legal_moves(b) == set()


@pytest.mark.parametrize("depth,count", [(1, 4), (2, 12), (3, 56), (4, 244)])
def test_perft_small(depth, count):
    assert oth.perft(oth.initial_board(), depth) == count
    assert oracles.grid_perft(oracles.GridBoard(), depth) == count


def test_random_positions_match_ray_scan():
    for board in random_positions(3000, 0):
        grid = to_grid(board)
        assert oth.legal_moves(board) == grid.legal()
        for tok in oth.legal_moves(board):
            nxt, ref = oth.apply_move(board, tok), grid.play(tok)
            assert nxt.counts() == ref.counts()


def test_silent_pass():
    rng = stream(0, "pass-search")
    for _ in range(2000):
        board = oth.initial_board()
        while not board.terminal:
            moves = sorted(oth.legal_moves(board))
            tok = moves[rng.integers(len(moves))]
            nxt = oth.apply_move(board, tok)
            if not nxt.terminal and nxt.side == board.side:
                grid = to_grid(board).play(tok)
                other = oracles.LIGHT if grid.side == oracles.DARK else oracles.DARK
                assert grid.moves(other) == set() and grid.moves(grid.side)
                return
            board = nxt
    pytest.fail("no pass found")


@given(st.integers(0, 2**32))
def test_disc_conservation(seed):
    rng = np.random.default_rng(seed)
    board = oth.initial_board()
    while not board.terminal:
        moves = sorted(oth.legal_moves(board))
        nxt = oth.apply_move(board, moves[rng.integers(len(moves))])
        assert nxt.discs == board.discs + 1
        assert not nxt.dark & nxt.light
        board = nxt


def test_generated_games_replay_and_masks():
    games = oth.generate_games(300, stream(1, "games"), oth.othello_lengths(stream(1, "len"), 300))
    for g in games:
        assert len(set(g.tokens.tolist())) == len(g)
        boards = oth.replay(g.tokens)
        for k, board in enumerate(boards[1:]):
            assert int(g.masks[k]) == oth.legal_token_mask(board)
            assert oth.legal_moves(board) == to_grid(board).legal()
            if not board.terminal:
                assert int(g.masks[k]) != 0


def test_full_games_length():
    games = oth.generate_games(2000, stream(2, "full"), with_masks=False)
    lengths = np.array([len(g) for g in games])
    assert 58 <= lengths.mean() <= 60
    assert lengths.max() == 60


def test_corpus_roundtrip_and_determinism(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    oth.generate_corpus(500, 7, a, tmp_path / "a.masks", chunk=128)
    oth.generate_corpus(500, 7, b, tmp_path / "b.masks", chunk=128)
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.masks").read_bytes() == (tmp_path / "b.masks").read_bytes()
    corpus, masks = oth.read_corpus(a), oth.read_masks(tmp_path / "a.masks")
    assert len(corpus) == 500
    assert all(15 <= len(g) <= 59 for g in corpus)
    for toks, ms in zip(corpus[:50], masks):
        boards = oth.replay(toks)
        assert [oth.legal_token_mask(x) for x in boards[1:]] == ms.tolist()
    with pytest.raises(ValueError):
        oth.read_masks(a)


def test_no_pass_filter(tmp_path):
    stats = oth.generate_corpus(300, 3, tmp_path / "c.bin", no_pass_games=True, min_len=60, max_len=60)
    assert stats["with_passes"] == 0 and stats["count"] == 300


def test_evaluate_predictions(tmp_path):
    corpus, masks = tmp_path / "c.bin", tmp_path / "c.bin.masks"
    oth.generate_corpus(5, 0, corpus, masks)
    games = oth.read_corpus(corpus)
    ms = oth.read_masks(masks)
    lines = []
    for toks, m in zip(games, ms):
        for k in range(len(toks)):
            legal = oth.token_mask_to_bools(int(m[k]))
            if legal.any():
                lines.append({"tokens": toks[:k + 1].tolist(), "logits": np.where(legal, 50.0, 0.0).tolist()})
    import json
    (tmp_path / "p.jsonl").write_text("".join(json.dumps(x) + "\n" for x in lines))
    result = oth.evaluate_predictions(tmp_path / "p.jsonl", masks, corpus)
    assert result["itr"] == 0 and result["tvd"] < 1e-15 + 60 * np.exp(-50)
    assert result["positions"] == len(lines)

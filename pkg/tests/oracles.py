"""Slow, independent reference implementations used only by the tests."""
import itertools
import math

import numpy as np


# -- transformer -----------------------------------------------------------

def naive_logits(params, t, embed_scale=None, resid_scale=None):
    """Last-position logits by explicit loops over positions.

    ``embed_scale``/``resid_scale`` are optional (len(t), d) dropout factors.
    """
    dims = params.dims
    t = [int(x) for x in t]
    n = len(t)
    xs = []
    for i, tok in enumerate(t):
        x = params.E[tok].copy()
        if embed_scale is not None:
            x = x * embed_scale[i]
        xs.append(x)
    normed = []
    for x in xs:
        if dims.norm == "rmsnorm":
            r = math.sqrt(sum(float(c) ** 2 for c in x) / dims.d + dims.norm_eps)
            normed.append(params.gains * x / r)
        else:
            normed.append(x)
    q = normed[-1] @ params.W_Q
    scores = [float(q @ (normed[i] @ params.W_K)) / math.sqrt(dims.d_k) for i in range(n)]
    top = max(scores)
    weights = [math.exp(s - top) for s in scores]
    total = sum(weights)
    mixed = np.zeros(dims.d)
    for i in range(n):
        h = normed[i] @ params.W_V @ params.W_O
        if resid_scale is not None:
            h = h * resid_scale[i]
        mixed += weights[i] / total * h
    return (xs[-1] + mixed) @ params.U


def central_difference(f, theta, h=1e-6):
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        up = f(theta)
        theta[i] = old - h
        down = f(theta)
        theta[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def brute_force_precision(B, D, s):
    """(min legal-minus-illegal margin, max spread among legal logits) over
    every length-``s`` sequence, from the constant-attention formula."""
    v = B.shape[0]
    worst, spread = math.inf, 0.0
    for t in itertools.permutations(range(v), s):
        f = B[t[-1]] + sum(D[i] for i in t) / s
        legal = [u for u in range(v) if u not in t]
        lo = min(f[u] for u in legal)
        hi = max(f[i] for i in t)
        worst = min(worst, lo - hi)
        spread = max(spread, max(f[u] for u in legal) - lo)
    return worst, spread


# -- othello ---------------------------------------------------------------

EMPTY, DARK, LIGHT = 0, 1, 2
DIRECTIONS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
CENTER = {(3, 3), (3, 4), (4, 3), (4, 4)}


def token_cells():
    """Row-major cells (row 0 = rank 1, col 0 = file a) minus the centre."""
    return [(r, c) for r in range(8) for c in range(8) if (r, c) not in CENTER]


TOKEN_CELLS = token_cells()
TOKEN_OF_CELL = {cell: i for i, cell in enumerate(TOKEN_CELLS)}


class GridBoard:
    def __init__(self):
        self.cells = [[EMPTY] * 8 for _ in range(8)]
        self.cells[3][3] = LIGHT  # d4
        self.cells[3][4] = DARK   # e4
        self.cells[4][3] = DARK   # d5
        self.cells[4][4] = LIGHT  # e5
        self.side = DARK

    def copy(self):
        b = GridBoard.__new__(GridBoard)
        b.cells = [row[:] for row in self.cells]
        b.side = self.side
        return b

    def flips(self, r, c, side):
        if self.cells[r][c] != EMPTY:
            return []
        other = LIGHT if side == DARK else DARK
        out = []
        for dr, dc in DIRECTIONS:
            run = []
            rr, cc = r + dr, c + dc
            while 0 <= rr < 8 and 0 <= cc < 8 and self.cells[rr][cc] == other:
                run.append((rr, cc))
                rr, cc = rr + dr, cc + dc
            if run and 0 <= rr < 8 and 0 <= cc < 8 and self.cells[rr][cc] == side:
                out.extend(run)
        return out

    def moves(self, side=None):
        side = self.side if side is None else side
        return {TOKEN_OF_CELL[(r, c)] for r in range(8) for c in range(8) if self.flips(r, c, side)}

    def play(self, token):
        r, c = TOKEN_CELLS[token]
        fl = self.flips(r, c, self.side)
        if not fl:
            raise ValueError("illegal")
        b = self.copy()
        b.cells[r][c] = self.side
        for rr, cc in fl:
            b.cells[rr][cc] = self.side
        other = LIGHT if self.side == DARK else DARK
        if b.moves(other):
            b.side = other
        elif not b.moves(self.side):
            b.side = None  # game over
        return b

    def legal(self):
        return set() if self.side is None else self.moves()

    def counts(self):
        flat = [x for row in self.cells for x in row]
        return flat.count(DARK), flat.count(LIGHT)


def grid_perft(board, depth):
    if depth == 0:
        return 1
    return sum(grid_perft(board.play(m), depth - 1) for m in board.legal())


def grid_from_bits(dark, light, side):
    b = GridBoard()
    for sq in range(64):
        r, c = divmod(sq, 8)
        b.cells[r][c] = DARK if dark >> sq & 1 else LIGHT if light >> sq & 1 else EMPTY
    b.side = side
    return b


# -- gradients -------------------------------------------------------------

def random_params(dims, rng, scale=0.5):
    from setcomplement.model import ModelParams

    params = ModelParams.from_flat(dims, rng.normal(0.0, scale, dims.size))
    params.gains[:] = 1.0 + 0.3 * rng.normal(size=dims.d)
    return params


def gradient_errors(params, inputs, targets, masks, h=1e-6):
    """Per-tensor ``||g - g_fd|| / ||g_fd||`` of the analytic NLL gradient
    against central differences, with dropout ``masks`` frozen."""
    from setcomplement.model import ModelParams, backward, forward_batch, log_softmax

    dims = params.dims
    valid = targets >= 0
    ii, kk = np.nonzero(valid)

    def loss(vec):
        logits, _ = forward_batch(ModelParams.from_flat(dims, vec), inputs, masks=masks)
        return -log_softmax(logits)[ii, kk, targets[ii, kk]].mean()

    _, trace = forward_batch(params, inputs, masks=masks)
    _, grads = backward(trace, targets)
    fd = ModelParams.from_flat(dims, central_difference(loss, params.flat(), h))
    out = {}
    for name, g, ref in zip(("E", "gains", "W_Q", "W_K", "W_V", "W_O", "U"), grads.arrays(), fd.arrays()):
        scale = np.linalg.norm(ref)
        out[name] = float(np.linalg.norm(g - ref) / scale) if scale > 1e-9 else float(np.linalg.norm(g - ref))
    return out

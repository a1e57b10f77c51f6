"""Executable checks for the minimal-transformer rank and precision results.

A model has *precision C at length s* when, for every repetition-free input
of length ``s``, every legal token's logit exceeds every occupied token's
logit by more than ``C`` and all legal logits are equal. Here that property
is certified by exhaustive enumeration (or, past a budget, by sampling).

For constant attention the logits are ``B[t_s] + mean_i D[t_i]``; we
evaluate ``s * f(t) = s B[t_s] + sum_i D[t_i]`` and divide the resulting
margins by ``s`` once, which keeps integer-valued certificates exact.
"""
import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelDims, ModelParams, derived_matrices, forward_batch
from .task import sample_sequences

DEFAULT_CAP = 10_000_000
DEFAULT_SAMPLES = 1_000_000
RANK_TAU = 1e-8


class EnumerationBudgetError(RuntimeError):
    pass


def build_hardcoded(v: int, C: float, norm: str = "identity", norm_eps: float = 1e-6) -> ModelParams:
    """The ``d = d_v = v-1``, ``d_k = 1`` model whose precision is ``C``.

    Tokens ``0..v-2`` embed as unit vectors and token ``v-1`` as the
    all-minus-ones vector; ``U = [-I | 0]``, ``W_V = vC I``, ``W_O = I`` and
    zero query/key weights. Exact only with ``norm="identity"``: rmsnorm
    rescales the unit rows relative to the last one.
    """
    if v < 2 or not C > 0:
        raise ValueError("need v >= 2 and C > 0")
    n = v - 1
    eye = np.eye(n)
    return ModelParams(
        dims=ModelDims(v=v, d=n, d_k=1, d_v=n, norm=norm, norm_eps=norm_eps),
        E=np.vstack([eye, -np.ones((1, n))]),
        gains=np.ones(n),
        W_Q=np.zeros((n, 1)),
        W_K=np.zeros((n, 1)),
        W_V=v * C * eye,
        W_O=eye.copy(),
        U=np.hstack([-eye, np.zeros((n, 1))]),
    )


def count_sequences(v: int, s: int) -> int:
    return math.perm(v, s)


def _sequences_with_first(v: int, s: int, first: int) -> np.ndarray:
    if s == 1:
        return np.array([[first]], dtype=np.int64)
    rest = [t for t in range(v) if t != first]
    tails = np.array(list(itertools.permutations(rest, s - 1)), dtype=np.int64)
    return np.hstack([np.full((len(tails), 1), first, dtype=np.int64), tails])


def enumerate_sequences(v: int, s: int):
    """All repetition-free sequences of length ``s``, chunked by first token."""
    for first in range(v):
        yield _sequences_with_first(v, s, first)


def _legal(seqs: np.ndarray, v: int) -> np.ndarray:
    legal = np.ones((len(seqs), v), dtype=bool)
    legal[np.arange(len(seqs))[:, None], seqs] = False
    return legal


def _margins(scaled: np.ndarray, legal: np.ndarray) -> tuple[float, float]:
    """(min over rows of min legal - max occupied, max legal spread)."""
    lo = np.where(legal, scaled, np.inf).min(axis=1)
    hi = np.where(legal, scaled, -np.inf).max(axis=1)
    occ = np.where(legal, -np.inf, scaled).max(axis=1)
    return float((lo - occ).min()), float((hi - lo).max())


@dataclass
class LengthPrecision:
    length: int
    min_displacement: float
    max_equality_deviation: float
    sequences_checked: int
    exhaustive: bool
    passes: bool


@dataclass
class PrecisionReport:
    threshold: float
    eq_tol: float
    lengths: list[LengthPrecision] = field(default_factory=list)

    @property
    def passes(self) -> bool:
        return all(r.passes for r in self.lengths)

    def at(self, length: int) -> LengthPrecision:
        return next(r for r in self.lengths if r.length == length)


class _Evaluator:
    """Scaled logits ``s * f(t)`` for a batch of equal-length sequences."""

    def __init__(self, model):
        if isinstance(model, ModelParams):
            mats = derived_matrices(model)
            self.constant = not (np.any(model.W_Q) or np.any(model.W_K))
            self.params = model
            self.B, self.D, self.v = mats.B, mats.D, model.dims.v
        else:
            B, D = (np.asarray(m, dtype=np.float64) for m in model)
            if B.shape != D.shape or B.shape[0] != B.shape[1]:
                raise ValueError("B and D must be square matrices of equal shape")
            self.constant, self.params = True, None
            self.B, self.D, self.v = B, D, B.shape[0]

    def __call__(self, seqs: np.ndarray) -> np.ndarray:
        s = seqs.shape[1]
        if self.constant:
            return s * self.B[seqs[:, -1]] + self.D[seqs].sum(axis=1)
        out = []
        for start in range(0, len(seqs), 4096):
            logits, _ = forward_batch(self.params, seqs[start:start + 4096])
            out.append(s * logits[:, -1])
        return np.concatenate(out)


def check_precision(model, lengths, C: float, eq_tol: float = 0.0, cap: int = DEFAULT_CAP,
                    mode: str = "exhaustive", samples: int = DEFAULT_SAMPLES,
                    rng: np.random.Generator | None = None) -> PrecisionReport:
    """Certify precision ``C`` at each requested length.

    ``model`` is either :class:`ModelParams` or a ``(B, D)`` pair for the
    constant-attention form. In exhaustive mode a length whose sequence count
    exceeds ``cap`` raises :class:`EnumerationBudgetError`; ``mode="sampled"``
    checks ``samples`` random sequences instead and marks the result
    non-exhaustive.
    """
    ev = _Evaluator(model)
    v = ev.v
    report = PrecisionReport(threshold=C, eq_tol=eq_tol)
    for s in lengths:
        if not 1 <= s < v:
            raise ValueError(f"length {s} outside 1..{v - 1}")
        total = count_sequences(v, s)
        if mode == "exhaustive" and total > cap:
            raise EnumerationBudgetError(
                f"{total} sequences of length {s} exceed the cap of {cap}; use mode='sampled'"
            )
        disp, dev, checked = math.inf, 0.0, 0
        if mode == "exhaustive":
            chunks = enumerate_sequences(v, s)
        else:
            rng = rng or np.random.default_rng(0)
            chunks = (sample_sequences(v, s, min(65536, samples - i), rng) for i in range(0, samples, 65536))
        for seqs in chunks:
            a, b = _margins(ev(seqs), _legal(seqs, v))
            disp, dev = min(disp, a), max(dev, b)
            checked += len(seqs)
        disp, dev = disp / s, dev / s
        report.lengths.append(LengthPrecision(
            length=s, min_displacement=disp, max_equality_deviation=dev,
            sequences_checked=checked, exhaustive=mode == "exhaustive",
            passes=bool(disp > C and dev <= eq_tol),
        ))
    return report


@dataclass
class RankReport:
    name: str
    singular_values: list[float]
    rank: int
    tau: float


def numeric_rank(M, tau: float = RANK_TAU, name: str = "") -> RankReport:
    """Number of singular values above ``tau`` times the largest one."""
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    sv = np.linalg.svd(M, compute_uv=False) if M.size else np.zeros(0)
    rank = 0 if sv.size == 0 or sv[0] == 0 else int(np.count_nonzero(sv > tau * sv[0]))
    return RankReport(name=name, singular_values=[float(x) for x in sv], rank=rank, tau=tau)


def lemma_matrix(u, v, w) -> np.ndarray:
    """``1 u^T + v 1^T + diag(w)``."""
    u, v, w = (np.asarray(x, dtype=np.float64) for x in (u, v, w))
    ones = np.ones_like(u)
    return np.outer(ones, u) + np.outer(v, ones) + np.diag(w)


def verify_lemma_rank(u, v, w, tau: float = 1e-10) -> RankReport:
    w = np.asarray(w, dtype=np.float64)
    if np.any(w >= 0):
        raise ValueError("every entry of w must be negative")
    return numeric_rank(lemma_matrix(u, v, w), tau, name="1u^T + v1^T + diag(w)")


def bias_displacement(model) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(model, ModelParams):
        mats = derived_matrices(model)
        return mats.B, mats.D
    return tuple(np.asarray(m, dtype=np.float64) for m in model)


@dataclass
class TheoremBoundsVerdict:
    precision: PrecisionReport
    rank_B_plus_D: RankReport
    rank_D: RankReport
    part_a: str
    part_b: str

    @property
    def ok(self) -> bool:
        return "violated" not in (self.part_a, self.part_b)


def verify_theorem_bounds(B, D, C: float, eq_tol: float = 1e-9, tau: float = RANK_TAU) -> TheoremBoundsVerdict:
    """Rank lower bounds implied by precision ``C`` at lengths 1 and 2."""
    B, D = np.asarray(B, dtype=np.float64), np.asarray(D, dtype=np.float64)
    v = B.shape[0]
    lengths = [s for s in (1, 2) if s < v]
    prec = check_precision((B, D), lengths, C, eq_tol)
    r_bd = numeric_rank(B + D, tau, "B+D")
    r_d = numeric_rank(D, tau, "D")
    has1 = prec.at(1).passes
    has2 = has1 and 2 in lengths and prec.at(2).passes

    def verdict(applies, rank):
        if not applies:
            return "not applicable"
        return "holds" if rank >= v - 1 else "violated"

    return TheoremBoundsVerdict(prec, r_bd, r_d, verdict(has1, r_bd.rank), verdict(has2, r_d.rank))


@dataclass
class BalanceReport:
    holds: bool
    max_lhs: float
    bound: float

    @property
    def margin(self) -> float:
        return self.bound - self.max_lhs


def check_balance_condition(B, D, C: float) -> BalanceReport:
    """``f((t))_u - f((t))_t < 2C`` for all distinct tokens ``t, u``."""
    M = np.asarray(B, dtype=np.float64) + np.asarray(D, dtype=np.float64)
    lhs = M - np.diag(M)[:, None]
    np.fill_diagonal(lhs, -np.inf)
    worst = float(lhs.max()) if M.shape[0] > 1 else -math.inf
    return BalanceReport(holds=bool(worst < 2 * C), max_lhs=worst, bound=2 * C)


@dataclass
class DecayRow:
    length: int
    min_displacement: float
    bound: float
    meets_bound: bool     # min_displacement >= bound
    strict: bool          # > bound with the equality branch within eq_tol


@dataclass
class DecayReport:
    C: float
    precision_1: bool
    precision_2: bool
    balance: BalanceReport
    rows: list[DecayRow]

    @property
    def applicable(self) -> bool:
        return self.precision_1 and self.precision_2 and self.balance.holds

    @property
    def violations(self) -> int:
        return sum(not r.meets_bound for r in self.rows)

    @property
    def verdict(self) -> str:
        if not self.applicable:
            return "not applicable"
        return "holds" if all(r.strict for r in self.rows) else "violated"


def check_length_decay(B, D, C: float, eq_tol: float = 0.0, cap: int = DEFAULT_CAP) -> DecayReport:
    """Measured precision at lengths ``3..v-1`` against the ``(2/s) C`` bound.

    The table is computed even when the hypotheses (precision ``C`` at
    lengths 1 and 2 plus the balance condition) fail; ``verdict`` then reads
    "not applicable".
    """
    B, D = np.asarray(B, dtype=np.float64), np.asarray(D, dtype=np.float64)
    v = B.shape[0]
    base = check_precision((B, D), [s for s in (1, 2) if s < v], C, eq_tol, cap)
    p1 = base.at(1).passes
    p2 = v > 2 and base.at(2).passes
    rows = []
    lengths = list(range(3, v))
    if lengths:
        for r in check_precision((B, D), lengths, C, eq_tol, cap).lengths:
            bound = 2.0 * C / r.length
            rows.append(DecayRow(
                length=r.length, min_displacement=r.min_displacement, bound=bound,
                meets_bound=bool(r.min_displacement >= bound),
                strict=bool(r.min_displacement > bound and r.max_equality_deviation <= eq_tol),
            ))
    return DecayReport(C=C, precision_1=p1, precision_2=p2, balance=check_balance_condition(B, D, C), rows=rows)


def to_jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        out = {k: to_jsonable(v) for k, v in asdict(obj).items()}
        for prop in ("passes", "applicable", "violations", "verdict", "ok", "margin"):
            if isinstance(getattr(type(obj), prop, None), property):
                out[prop] = to_jsonable(getattr(obj, prop))
        return out
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else str(obj)
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    return obj


def verify_hardcoded(v: int, C: float, norm: str = "identity", eq_tol: float = 0.0,
                     tau: float = RANK_TAU, cap: int = DEFAULT_CAP) -> dict:
    """Full certificate for the hardcoded model; ``report["passed"]`` is the verdict.

    Asserted: precision ``C`` at every length ``1..v-1``; rank(B+D) and
    rank(D) at least ``v-1``; measured precision at each length ``s >= 3``
    no smaller than ``(2/s) C2`` with ``C2`` the measured length-2
    precision. The balance condition and the formal applicability of the
    decay statement at ``C`` are reported but not asserted.
    """
    params = build_hardcoded(v, C, norm)
    B, D = bias_displacement(params)
    precision = check_precision(params, range(1, v), C, eq_tol, cap)
    r_bd = numeric_rank(B + D, tau, "B+D")
    r_d = numeric_rank(D, tau, "D")
    balance = check_balance_condition(B, D, C)
    decay_at_C = check_length_decay(B, D, C, eq_tol, cap)
    decay_measured = None
    if v > 2:
        c2 = precision.at(2).min_displacement
        decay_measured = check_length_decay(B, D, c2, eq_tol, cap)
    checks = {
        "precision": precision.passes,
        "rank_B_plus_D": r_bd.rank >= v - 1,
        "rank_D": r_d.rank >= v - 1,
        "decay_measured": decay_measured is None or decay_measured.violations == 0,
    }
    return {
        "v": v,
        "C": C,
        "norm": norm,
        "eq_tol": eq_tol,
        "tau": tau,
        "B": B.tolist(),
        "D": D.tolist(),
        "precision": to_jsonable(precision),
        "ranks": to_jsonable([r_bd, r_d]),
        "balance": to_jsonable(balance),
        "decay_at_C": to_jsonable(decay_at_C),
        "decay_measured_C2": to_jsonable(decay_measured),
        "checks": checks,
        "passed": all(checks.values()),
    }

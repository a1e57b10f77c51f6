"""Single-layer, single-head, attention-only transformer.

The next token logits after the prefix ``t[:s]`` are

    f(t) = B[t_s] + sum_i softmax_i(a[t_s, t_i]) D[t_i]

with ``B = E U`` and ``D = E' W_V W_O U`` where ``E'`` is the normalized
embedding. :func:`forward_batch` evaluates every prefix of every row of a
batch at once (causal attention) and records what :func:`backward` needs.
"""
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import stats

PARAM_NAMES = ("E", "gains", "W_Q", "W_K", "W_V", "W_O", "U")
# Weight decay applies to these only; never to the embedding or norm gains.
DECAYED_PARAMS = ("W_Q", "W_K", "W_V", "W_O", "U")
NORM_MODES = ("rmsnorm", "identity")

INIT_STD = 0.02
# Largest x with finite exp(x) in float64.
EXP_LIMIT = float(np.log(np.finfo(np.float64).max))


@dataclass(frozen=True)
class ModelDims:
    v: int
    d: int
    d_k: int
    d_v: int
    norm: str = "rmsnorm"
    norm_eps: float = 1e-6

    def __post_init__(self):
        if min(self.v, self.d, self.d_k, self.d_v) < 1:
            raise ValueError(f"dimensions must be positive: {self}")
        if self.norm not in NORM_MODES:
            raise ValueError(f"norm must be one of {NORM_MODES}, got {self.norm!r}")
        if not self.norm_eps > 0:
            raise ValueError("norm_eps must be positive")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        v, d, dk, dv = self.v, self.d, self.d_k, self.d_v
        return {
            "E": (v, d),
            "gains": (d,),
            "W_Q": (d, dk),
            "W_K": (d, dk),
            "W_V": (d, dv),
            "W_O": (dv, d),
            "U": (d, v),
        }

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


@dataclass
class ModelParams:
    dims: ModelDims
    E: np.ndarray
    gains: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        for name, shape in self.dims.shapes().items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in PARAM_NAMES]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, dims: ModelDims, vec: np.ndarray) -> "ModelParams":
        """Views into ``vec`` (no copy) in the fixed parameter order."""
        out, pos = {}, 0
        for name, shape in dims.shapes().items():
            size = int(np.prod(shape))
            out[name] = vec[pos:pos + size].reshape(shape)
            pos += size
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {pos}")
        return cls(dims=dims, **out)

    @classmethod
    def zeros(cls, dims: ModelDims) -> "ModelParams":
        return cls.from_flat(dims, np.zeros(dims.size))

    def copy(self) -> "ModelParams":
        return ModelParams.from_flat(self.dims, self.flat().copy())


def decay_mask(dims: ModelDims) -> np.ndarray:
    """Flat 0/1 vector selecting the weight-decayed entries."""
    return np.concatenate([
        np.full(int(np.prod(shape)), float(name in DECAYED_PARAMS))
        for name, shape in dims.shapes().items()
    ])


def init_params(dims: ModelDims, rng: np.random.Generator) -> ModelParams:
    """Truncated normal(0, 0.02) at two standard deviations; gains start at one."""
    arrays = {}
    for name, shape in dims.shapes().items():
        if name == "gains":
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = stats.truncnorm.rvs(-2.0, 2.0, scale=INIT_STD, size=shape, random_state=rng)
    return ModelParams(dims=dims, **arrays)


@dataclass(frozen=True)
class DropoutSpec:
    p_embed: float = 0.0
    p_resid: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        for p in (self.p_embed, self.p_resid):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout rate must be in [0, 1), got {p}")

    @property
    def active(self) -> bool:
        return self.enabled and (self.p_embed > 0 or self.p_resid > 0)


NO_DROPOUT = DropoutSpec(enabled=False)


@dataclass(frozen=True)
class DropoutMasks:
    """Inverted-dropout scale factors (0 or 1/(1-p)); ``None`` means identity."""
    embed: np.ndarray | None = None
    resid: np.ndarray | None = None


def sample_masks(shape, dropout: DropoutSpec, rng: np.random.Generator) -> DropoutMasks:
    if not dropout.active:
        return DropoutMasks()

    def draw(p):
        if p == 0:
            return None
        return (rng.random(shape) >= p) / (1.0 - p)

    return DropoutMasks(embed=draw(dropout.p_embed), resid=draw(dropout.p_resid))


# -- pieces ----------------------------------------------------------------

def rmsnorm(x: np.ndarray, gains: np.ndarray, eps: float) -> np.ndarray:
    """``gains * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return gains * x / r


def normalize(params: ModelParams, x: np.ndarray) -> np.ndarray:
    if params.dims.norm == "identity":
        return x
    return rmsnorm(x, params.gains, params.dims.norm_eps)


def next_token_distribution(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


@dataclass
class DerivedMatrices:
    B: np.ndarray
    A: np.ndarray
    D: np.ndarray
    saturated: int = 0


def derived_matrices(params: ModelParams) -> DerivedMatrices:
    """Bias ``B = E U``, attention weights ``A`` and displacements ``D``.

    Attention logits beyond the float64 exp range are clipped so that ``A``
    stays finite; the number of clipped entries is reported.
    """
    en = normalize(params, params.E)
    scores = (en @ params.W_Q) @ (en @ params.W_K).T / np.sqrt(params.dims.d_k)
    saturated = int(np.count_nonzero(scores > EXP_LIMIT))
    A = np.exp(np.minimum(scores, EXP_LIMIT))
    D = en @ params.W_V @ params.W_O @ params.U
    return DerivedMatrices(B=params.E @ params.U, A=A, D=D, saturated=saturated)


def forward_constant_attention(B: np.ndarray, D: np.ndarray, t) -> np.ndarray:
    """Logits when all attention weights are equal: ``B[t_s] + mean_i D[t_i]``."""
    t = np.asarray(t, dtype=np.int64)
    if t.size == 0:
        raise ValueError("empty sequence")
    return B[t[-1]] + D[t].sum(axis=0) / t.size


# -- batched forward / backward -------------------------------------------

@dataclass
class ForwardTrace:
    params: ModelParams
    tokens: np.ndarray
    masks: DropoutMasks
    xt: np.ndarray          # embedding rows after embedding dropout
    rms: np.ndarray | None  # per-row RMS (rmsnorm mode only)
    normed: np.ndarray
    q: np.ndarray
    k: np.ndarray
    attn: np.ndarray        # (N, L, L) causal softmax weights
    vv: np.ndarray          # normed @ W_V
    ht: np.ndarray          # rows of normed @ W_V @ W_O after residual dropout
    resid: np.ndarray       # xt + attn @ ht, the pre-unembedding stream
    logits: np.ndarray
    saturated: int = 0


def forward_batch(params: ModelParams, tokens, dropout: DropoutSpec = NO_DROPOUT,
                  rng: np.random.Generator | None = None,
                  masks: DropoutMasks | None = None) -> tuple[np.ndarray, ForwardTrace]:
    """Logits for every prefix of every row, shape ``(N, L, v)``.

    ``logits[i, k]`` is the prediction after ``tokens[i, :k+1]``. Explicit
    ``masks`` override sampling, which is how gradient checks freeze dropout.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ValueError("tokens must be a non-empty (N, L) array")
    dims = params.dims
    n, length = tokens.shape
    if masks is None:
        if dropout.active and rng is None:
            raise ValueError("dropout needs an rng")
        masks = sample_masks((n, length, dims.d), dropout, rng)

    xt = params.E[tokens]
    if masks.embed is not None:
        xt = xt * masks.embed
    if dims.norm == "rmsnorm":
        rms = np.sqrt(np.mean(xt * xt, axis=-1, keepdims=True) + dims.norm_eps)
        normed = params.gains * (xt / rms)
    else:
        rms, normed = None, xt

    q = normed @ params.W_Q
    k = normed @ params.W_K
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dims.d_k)
    causal = np.tril(np.ones((length, length), dtype=bool))
    saturated = int(np.count_nonzero((scores > EXP_LIMIT) & causal))
    scores = np.where(causal, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)

    vv = normed @ params.W_V
    ht = vv @ params.W_O
    if masks.resid is not None:
        ht = ht * masks.resid
    resid = xt + attn @ ht
    logits = resid @ params.U
    trace = ForwardTrace(params, tokens, masks, xt, rms, normed, q, k, attn, vv, ht, resid, logits, saturated)
    return logits, trace


def forward(params: ModelParams, t, dropout: DropoutSpec = NO_DROPOUT,
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, ForwardTrace]:
    """Next token logits after the whole sequence ``t``."""
    t = np.asarray(t, dtype=np.int64)
    if t.size == 0:
        raise ValueError("empty sequence")
    if t.size >= params.dims.v:
        raise ValueError("sequence length must be below v")
    logits, trace = forward_batch(params, t[None, :], dropout, rng)
    return logits[0, -1], trace


def logits_fn(params: ModelParams):
    """Deterministic ``tokens -> logits`` predictor for evaluation."""
    return lambda tokens: forward_batch(params, tokens)[0]


def backward(trace: ForwardTrace, targets) -> tuple[float, ModelParams]:
    """Mean NLL over positions with ``targets >= 0`` and its exact gradient.

    ``targets`` has the shape of ``trace.tokens``; a negative entry excludes
    that prefix from the loss. Dropout masks in the trace act as constants.
    """
    p = trace.params
    dims = p.dims
    targets = np.asarray(targets, dtype=np.int64)
    valid = targets >= 0
    count = int(valid.sum())
    if count == 0:
        raise ValueError("no valid targets")
    n, length = trace.tokens.shape
    d, v = dims.d, dims.v

    logp = log_softmax(trace.logits)
    ii, kk = np.nonzero(valid)
    loss = -float(logp[ii, kk, targets[ii, kk]].sum()) / count

    dz = np.exp(logp)
    dz[ii, kk, targets[ii, kk]] -= 1.0
    dz[~valid] = 0.0
    dz /= count

    flat = lambda a: a.reshape(n * length, -1)
    dU = flat(trace.resid).T @ flat(dz)
    dres = dz @ p.U.T
    dxt = dres.copy()

    # attention output O = attn @ ht
    dattn = dres @ trace.ht.transpose(0, 2, 1)
    dht = trace.attn.transpose(0, 2, 1) @ dres
    dscores = trace.attn * (dattn - np.sum(dattn * trace.attn, axis=-1, keepdims=True))
    dscores /= np.sqrt(dims.d_k)
    dq = dscores @ trace.k
    dk = dscores.transpose(0, 2, 1) @ trace.q
    dW_Q = flat(trace.normed).T @ flat(dq)
    dW_K = flat(trace.normed).T @ flat(dk)
    dnormed = dq @ p.W_Q.T + dk @ p.W_K.T

    dh = dht if trace.masks.resid is None else dht * trace.masks.resid
    dW_O = flat(trace.vv).T @ flat(dh)
    dvv = dh @ p.W_O.T
    dW_V = flat(trace.normed).T @ flat(dvv)
    dnormed += dvv @ p.W_V.T

    if dims.norm == "rmsnorm":
        r = trace.rms
        y = trace.xt / r
        dgains = np.sum(flat(dnormed * y), axis=0)
        dy = dnormed * p.gains
        dxt += dy / r - trace.xt * np.sum(dy * trace.xt, axis=-1, keepdims=True) / (d * r ** 3)
    else:
        dgains = np.zeros(d)
        dxt += dnormed

    dx = dxt if trace.masks.embed is None else dxt * trace.masks.embed
    onehot = np.zeros((n * length, v))
    onehot[np.arange(n * length), trace.tokens.ravel()] = 1.0
    dE = onehot.T @ flat(dx)

    grads = ModelParams(dims=dims, E=dE, gains=dgains, W_Q=dW_Q, W_K=dW_K, W_V=dW_V, W_O=dW_O, U=dU)
    return loss, grads


# -- checkpoints -----------------------------------------------------------

_MAGIC = b"SCTMODEL"


def save_checkpoint(path, params: ModelParams, seed: int | None = None, **extra) -> None:
    """JSON header then row-major float64 LE matrices in the fixed order."""
    dims = params.dims
    header = {
        "dims": {"v": dims.v, "d": dims.d, "d_k": dims.d_k, "d_v": dims.d_v},
        "norm": dims.norm,
        "norm_eps": dims.norm_eps,
        "seed": seed,
        "order": list(PARAM_NAMES),
        **extra,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path} is not a model checkpoint")
    (hlen,) = struct.unpack_from("<I", data, len(_MAGIC))
    start = len(_MAGIC) + 4
    header = json.loads(data[start:start + hlen])
    dims = ModelDims(**header["dims"], norm=header["norm"], norm_eps=header["norm_eps"])
    vec = np.frombuffer(data, dtype="<f8", offset=start + hlen, count=dims.size).astype(np.float64)
    return ModelParams.from_flat(dims, vec), header


def with_norm(params: ModelParams, norm: str) -> ModelParams:
    return ModelParams(dims=replace(params.dims, norm=norm), **{n: getattr(params, n) for n in PARAM_NAMES})

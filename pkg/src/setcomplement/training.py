"""NLL training with AdamW, gradient clipping, warmup/decay and BEMA.

A run keeps all parameters in one flat float64 vector; :class:`ModelParams`
views into it are rebuilt each step, which makes clipping, AdamW and the
EMA updates single vector operations.
"""
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import metrics
from .bema import BemaSpec, BemaTracker
from .model import (
    DropoutSpec,
    ModelDims,
    ModelParams,
    backward,
    decay_mask,
    forward_batch,
    init_params,
    log_softmax,
    logits_fn,
)
from .rng import stream
from .task import make_training_batch, sample_sequences


def nll_loss(logits, target: int) -> float:
    """``-log softmax(logits)[target]`` in log-sum-exp form."""
    return -float(log_softmax(np.asarray(logits, dtype=np.float64))[target])


def batch_targets(batch) -> tuple[np.ndarray, np.ndarray]:
    """Inputs ``[:, :s]`` and targets ``[:, 1:]`` from rows of length ``s+1``."""
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 2 or batch.shape[1] < 2:
        raise ValueError("training rows need length >= 2")
    return batch[:, :-1], batch[:, 1:]


def batch_loss(params: ModelParams, batch, dropout: DropoutSpec | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Mean NLL over rows and prefix lengths ``1..s``."""
    inputs, targets = batch_targets(batch)
    logits, _ = forward_batch(params, inputs, dropout or DropoutSpec(enabled=False), rng)
    logp = log_softmax(logits)
    n, s = targets.shape
    return -float(logp[np.arange(n)[:, None], np.arange(s)[None, :], targets].mean())


def loss_and_grad(params: ModelParams, batch, dropout: DropoutSpec | None = None,
                  rng: np.random.Generator | None = None) -> tuple[float, ModelParams]:
    inputs, targets = batch_targets(batch)
    _, trace = forward_batch(params, inputs, dropout or DropoutSpec(enabled=False), rng)
    return backward(trace, targets)


def clip_gradients(grads: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    """Rescale to global L2 norm ``max_norm`` if larger; returns (grads, norm)."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = float(np.sqrt(np.dot(grads, grads)))
    if norm > max_norm:
        grads = grads * (max_norm / norm)
    return grads, norm


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    max_grad_norm: float = 1.0
    n: int = 0

    @classmethod
    def create(cls, size: int, **hypers) -> "OptimizerState":
        return cls(m=np.zeros(size), v=np.zeros(size), **hypers)


def adamw_step(theta: np.ndarray, grads: np.ndarray, state: OptimizerState, lr: float,
               decay: np.ndarray | float = 1.0) -> np.ndarray:
    """One decoupled-weight-decay Adam step, in place on ``theta``.

    ``decay`` is a 0/1 mask (or scalar) selecting entries subject to weight
    decay.
    """
    state.n += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.n)
    v_hat = state.v / (1.0 - b2 ** state.n)
    update = m_hat / (np.sqrt(v_hat) + state.eps)
    if state.weight_decay:
        update = update + state.weight_decay * decay * theta
    theta -= lr * update
    return theta


@dataclass(frozen=True)
class ScheduleSpec:
    peak_lr: float
    warmup_steps: int
    end_multiplier: float
    max_steps: int

    def __post_init__(self):
        if self.peak_lr < 0 or self.warmup_steps < 0 or self.max_steps < 0:
            raise ValueError(f"invalid schedule {self}")
        if not 0 < self.end_multiplier <= 1:
            raise ValueError("end_multiplier must lie in (0, 1]")


def lr_at(step: int, schedule: ScheduleSpec) -> float:
    """Linear warmup to the peak, then linear decay to ``peak * end_multiplier``."""
    peak, warm = schedule.peak_lr, schedule.warmup_steps
    if step < warm:
        return peak * (step + 1) / warm
    span = schedule.max_steps - warm
    if span <= 0:
        return peak
    frac = min(step - warm, span) / span
    return peak * (1.0 - frac * (1.0 - schedule.end_multiplier))


@dataclass
class TrainRunConfig:
    v: int
    s: int
    d: int
    d_k: int
    d_v: int
    norm: str = "rmsnorm"
    norm_eps: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    max_grad_norm: float = 1.0
    peak_lr: float = 1e-2
    warmup_steps: int = 1000
    end_multiplier: float = 0.1
    max_steps: int = 10_000_000
    p_embed: float = 0.0
    p_resid: float = 0.0
    bema: list = field(default_factory=lambda: [BemaSpec()])
    seed: int = 0
    batch_size: int = 128
    val_size: int = 1024
    val_interval: int = 10_000
    patience: int = 1_000_000

    def __post_init__(self):
        self.bema = [b if isinstance(b, BemaSpec) else BemaSpec(**b) for b in self.bema]
        if not 1 <= self.s < self.v:
            raise ValueError(f"need 1 <= s < v, got s={self.s}, v={self.v}")
        if self.val_interval < 1 or self.patience < 0:
            raise ValueError("val_interval must be >= 1 and patience >= 0")

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.v, self.d, self.d_k, self.d_v, self.norm, self.norm_eps)

    @property
    def dropout(self) -> DropoutSpec:
        return DropoutSpec(self.p_embed, self.p_resid)

    @property
    def schedule(self) -> ScheduleSpec:
        return ScheduleSpec(self.peak_lr, self.warmup_steps, self.end_multiplier, self.max_steps)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["bema"] = [b.as_dict() for b in self.bema]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainRunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class RunRecord:
    config: dict
    history: list = field(default_factory=list)
    best: dict = field(default_factory=dict)
    diverged: bool = False
    diverged_step: int | None = None
    steps: int = 0
    saturated: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(**data)


def _finite(x) -> bool:
    return bool(np.all(np.isfinite(x)))


class Trainer:
    """Stateful single run; :func:`train_run` drives it to completion."""

    def __init__(self, config: TrainRunConfig):
        self.config = config
        c = config
        self.dims = c.dims
        self.theta = init_params(self.dims, stream(c.seed, "init")).flat()
        self.decay = decay_mask(self.dims)
        self.opt = OptimizerState.create(
            self.theta.size, beta1=c.beta1, beta2=c.beta2, weight_decay=c.weight_decay,
            eps=c.adam_eps, max_grad_norm=c.max_grad_norm,
        )
        self.schedule = c.schedule
        self.dropout = c.dropout
        self.bema = BemaTracker(self.theta, c.bema)
        self.val_batch = sample_sequences(c.v, c.v - 1, c.val_size, stream(c.seed, "validation"))
        self.train_len_batch = sample_sequences(c.v, c.s, c.val_size, stream(c.seed, "validation-train-length"))
        self.step_count = 0
        self.saturated = 0
        self.diverged = False
        self.diverged_step = None
        self._losses = []
        self._t0 = time.perf_counter()

    def params(self, theta: np.ndarray | None = None) -> ModelParams:
        return ModelParams.from_flat(self.dims, self.theta if theta is None else theta)

    def step(self) -> float:
        c = self.config
        n = self.step_count
        batch = make_training_batch(c.v, c.s, c.batch_size, stream(c.seed, "batch", n))
        inputs, targets = batch_targets(batch)
        rng = stream(c.seed, "dropout", n) if self.dropout.active else None
        # overflow here means divergence, which is detected just below
        with np.errstate(over="ignore", invalid="ignore"):
            _, trace = forward_batch(self.params(), inputs, self.dropout, rng)
            loss, grads = backward(trace, targets)
        self.saturated += trace.saturated
        if not math.isfinite(loss):
            self._diverge()
            return loss
        g, _ = clip_gradients(grads.flat(), c.max_grad_norm)
        adamw_step(self.theta, g, self.opt, lr_at(n, self.schedule), self.decay)
        if not _finite(self.theta):
            self._diverge()
            return loss
        self.bema.update(self.theta)
        self.step_count += 1
        self._losses.append(loss)
        return loss

    def _diverge(self):
        self.diverged = True
        self.diverged_step = self.step_count

    def _metrics(self, theta: np.ndarray) -> dict:
        predictor = logits_fn(self.params(theta))
        out = metrics.evaluate(predictor, self.val_batch, self.config.v)
        short = metrics.evaluate(predictor, self.train_len_batch, self.config.v)
        out.update({f"{k}_s": val for k, val in short.items()})
        return out

    def validate(self) -> dict:
        losses, self._losses = self._losses, []
        return {
            "step": self.step_count,
            "loss": float(np.mean(losses)) if losses else None,
            "lr": lr_at(min(self.step_count, self.schedule.max_steps), self.schedule),
            "train": self._metrics(self.theta),
            "bema": {key: self._metrics(th) for key, th in self.bema.materialize(self.theta).items()},
            "wall_clock": round(time.perf_counter() - self._t0, 3),
        }

    def advance(self, n_steps: int) -> None:
        for _ in range(n_steps):
            if self.diverged or self.step_count >= self.config.max_steps:
                return
            self.step()


def best_tvd(event: dict) -> float:
    """Smallest validation TVD in an event over training and BEMA parameters."""
    values = [event["train"]["tvd"]] + [m["tvd"] for m in event["bema"].values()]
    return min(values)


def summarize_history(history: list) -> dict:
    """Best (minimum) value of every metric for training and BEMA parameters."""
    best = {"train": {}, "bema": {}, "bema_by_spec": {}}
    for event in history:
        for name, val in event["train"].items():
            best["train"][name] = min(val, best["train"].get(name, math.inf))
        for key, mets in event["bema"].items():
            per = best["bema_by_spec"].setdefault(key, {})
            for name, val in mets.items():
                per[name] = min(val, per.get(name, math.inf))
                best["bema"][name] = min(val, best["bema"].get(name, math.inf))
    return best


def finalize(trainer: Trainer, history: list, extra: dict | None = None) -> RunRecord:
    return RunRecord(
        config=trainer.config.to_dict(),
        history=history,
        best=summarize_history(history),
        diverged=trainer.diverged,
        diverged_step=trainer.diverged_step,
        steps=trainer.step_count,
        saturated=trainer.saturated,
        extra=extra or {},
    )


def train_run(config: TrainRunConfig, sink=None, trainer: Trainer | None = None) -> RunRecord:
    """Train until ``max_steps``, divergence, or ``patience`` steps without a
    new best validation TVD. ``sink(event)`` sees every validation event."""
    trainer = trainer or Trainer(config)
    history = []
    best, best_step = math.inf, 0

    def record():
        event = trainer.validate()
        history.append(event)
        if sink is not None:
            sink(event)
        return event

    record()
    best = best_tvd(history[-1])
    while trainer.step_count < config.max_steps and not trainer.diverged:
        target = min(trainer.step_count + config.val_interval, config.max_steps)
        trainer.advance(target - trainer.step_count)
        if trainer.diverged:
            break
        event = record()
        if best_tvd(event) < best:
            best, best_step = best_tvd(event), trainer.step_count
        elif trainer.step_count - best_step >= config.patience:
            break
    return finalize(trainer, history)

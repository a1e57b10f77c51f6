"""Bias-corrected exponential moving average (BEMA) of parameters.

EMA weights are ``beta_n = (lag + n) ** -ema_power`` and the inference-time
parameters are ``alpha_n * (theta_n - theta_0) + ema_n`` with
``alpha_n = (lag + n) ** -bema_power``. Only ``theta_0`` and ``ema_n`` are
stored besides the live parameters.
"""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BemaSpec:
    ema_lag: float = 10.0
    ema_power: float = 0.5
    bema_power: float = 0.5

    def __post_init__(self):
        if self.ema_lag < 1:
            raise ValueError("ema_lag must be >= 1")
        if not (0 <= self.ema_power <= 1 and 0 <= self.bema_power <= 1):
            raise ValueError("ema_power and bema_power must lie in [0, 1]")

    @property
    def key(self) -> str:
        return f"{self.ema_lag:g}|{self.ema_power:g}|{self.bema_power:g}"

    def as_dict(self) -> dict:
        return {"ema_lag": self.ema_lag, "ema_power": self.ema_power, "bema_power": self.bema_power}


class BemaState:
    """Running EMA for one ``(ema_lag, ema_power)`` pair."""

    def __init__(self, theta0: np.ndarray, ema_lag: float, ema_power: float, bema_power: float = 0.0):
        self.theta0 = np.array(theta0, dtype=np.float64)
        self.ema = self.theta0.copy()
        self.ema_lag = float(ema_lag)
        self.ema_power = float(ema_power)
        self.bema_power = float(bema_power)
        self.n = 0

    def ema_weight(self, n: int | None = None) -> float:
        n = self.n if n is None else n
        return float(np.clip((self.ema_lag + n) ** -self.ema_power, 0.0, 1.0))

    def bema_weight(self, bema_power: float | None = None, n: int | None = None) -> float:
        power = self.bema_power if bema_power is None else bema_power
        n = self.n if n is None else n
        return float((self.ema_lag + n) ** -power)

    def update(self, theta_next: np.ndarray) -> "BemaState":
        beta = self.ema_weight()
        self.ema *= 1.0 - beta
        self.ema += beta * theta_next
        self.n += 1
        return self

    def params(self, theta_n: np.ndarray, bema_power: float | None = None) -> np.ndarray:
        alpha = self.bema_weight(bema_power)
        return alpha * (theta_n - self.theta0) + self.ema


def ema_update(state: BemaState, theta_next: np.ndarray) -> BemaState:
    return state.update(theta_next)


def bema_params(state: BemaState, theta_n: np.ndarray) -> np.ndarray:
    return state.params(theta_n)


def multi_state_update(states: list[BemaState], theta_next: np.ndarray) -> list[BemaState]:
    for state in states:
        state.update(theta_next)
    return states


def grid_specs(ema_lag: float = 10.0, ema_powers=None, bema_powers=None) -> list[BemaSpec]:
    """Cartesian grid; defaults to 10 EMA powers x 10 BEMA powers in 0.1..1."""
    tenths = [round(0.1 * i, 1) for i in range(1, 11)]
    ema_powers = tenths if ema_powers is None else ema_powers
    bema_powers = tenths if bema_powers is None else bema_powers
    return [BemaSpec(ema_lag, k, e) for k in ema_powers for e in bema_powers]


class BemaTracker:
    """Maintains one EMA per distinct ``(lag, power)`` among ``specs``.

    EMAs advance every optimizer step; BEMA parameters are materialized only
    when asked for, one set per spec.
    """

    def __init__(self, theta0: np.ndarray, specs: list[BemaSpec]):
        if not specs:
            raise ValueError("need at least one BEMA spec")
        self.specs = list(specs)
        self.states: dict[tuple[float, float], BemaState] = {}
        for spec in self.specs:
            pair = (spec.ema_lag, spec.ema_power)
            if pair not in self.states:
                self.states[pair] = BemaState(theta0, spec.ema_lag, spec.ema_power)

    def update(self, theta_next: np.ndarray) -> None:
        multi_state_update(list(self.states.values()), theta_next)

    def materialize(self, theta_n: np.ndarray) -> dict[str, np.ndarray]:
        return {
            spec.key: self.states[(spec.ema_lag, spec.ema_power)].params(theta_n, spec.bema_power)
            for spec in self.specs
        }

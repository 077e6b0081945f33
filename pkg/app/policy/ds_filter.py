"""
Second-order dynamic-system filter bridging low-rate policy outputs to the 1 kHz loop:

    F_ff'' = alpha * (beta * (F_df - F_ff) - F_ff')

integrated with semi-implicit Euler once per control tick.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Generic, Sequence, TypeVar

import numpy as np

from app.utils.exceptions import ConfigurationError, DimensionMismatchError, NonFiniteValueError

T = TypeVar("T")

__all__ = [
    "TimeUnit",
    "FilterConfig",
    "FilterState",
    "WrenchFilter",
    "LatestValueSlot",
    "filter_step",
    "run_filtered",
    "zero_order_hold",
]


class TimeUnit(str, Enum):
    TICK = "tick"
    SECOND = "second"


@dataclass(frozen=True)
class FilterConfig:
    """
    Attributes:
    - alpha (float): Outer gain.
    - beta (float): Spring gain on the tracking error.
    - time_unit (TimeUnit): Integrate with one step per tick (1.0) or per second (0.001).
    - enabled (bool): ``False`` passes F_df straight through.
    - tick_seconds (float): Control period used in ``second`` mode.
    """
    alpha: float = 0.9
    beta: float = 0.3
    time_unit: TimeUnit = TimeUnit.TICK
    enabled: bool = True
    tick_seconds: float = 0.001

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigurationError(reason=f"filter gains must be positive, got alpha={self.alpha}, beta={self.beta}")
        object.__setattr__(self, "time_unit", TimeUnit(self.time_unit))

    @property
    def delta(self) -> float:
        return 1.0 if self.time_unit is TimeUnit.TICK else self.tick_seconds


@dataclass(frozen=True)
class FilterState:
    f_ff: np.ndarray
    f_ff_dot: np.ndarray
    config: FilterConfig = field(default_factory=FilterConfig)

    @classmethod
    def zeros(cls, config: FilterConfig | None = None, dim: int = 6) -> "FilterState":
        return cls(f_ff=np.zeros(dim), f_ff_dot=np.zeros(dim), config=config or FilterConfig())

    @property
    def alpha(self) -> float:
        return self.config.alpha

    @property
    def beta(self) -> float:
        return self.config.beta


def filter_step(state: FilterState, f_df: np.ndarray) -> FilterState:
    """Advance the filter one control tick towards ``f_df``."""
    f_df = np.asarray(f_df, dtype=np.float64)
    if f_df.shape != state.f_ff.shape:
        raise DimensionMismatchError(where="filter input", expected=state.f_ff.shape, actual=f_df.shape)
    if not np.all(np.isfinite(f_df)):
        raise NonFiniteValueError(where="filter input F_df")

    config = state.config
    if not config.enabled:
        return FilterState(f_ff=f_df.copy(), f_ff_dot=np.zeros_like(f_df), config=config)

    delta = config.delta
    f_ff_ddot = config.alpha * (config.beta * (f_df - state.f_ff) - state.f_ff_dot)
    f_ff_dot = state.f_ff_dot + f_ff_ddot * delta
    f_ff = state.f_ff + f_ff_dot * delta
    return FilterState(f_ff=f_ff, f_ff_dot=f_ff_dot, config=config)


class WrenchFilter:
    """Stateful wrapper around :func:`filter_step` owned by the control loop."""

    def __init__(self, config: FilterConfig | None = None, dim: int = 6) -> None:
        self.config = config or FilterConfig()
        self.dim = dim
        self.state = FilterState.zeros(self.config, dim)

    def update(self, f_df: np.ndarray) -> np.ndarray:
        self.state = filter_step(self.state, f_df)
        return self.state.f_ff

    def reset(self) -> None:
        self.state = FilterState.zeros(self.config, self.dim)

    @property
    def output(self) -> np.ndarray:
        return self.state.f_ff


def zero_order_hold(
    policy_outputs: Sequence[tuple[int, np.ndarray]] | np.ndarray,
    inference_period_ticks: int,
    total_ticks: int,
) -> np.ndarray:
    """
    Expand policy outputs to one F_df per tick.

    ``policy_outputs`` is either a (K, d) array, where output k becomes active at tick
    ``k * inference_period_ticks``, or a sequence of ``(activation_tick, value)`` pairs
    in non-decreasing tick order. Ticks before the first activation hold zero.
    """
    if inference_period_ticks < 1:
        raise ConfigurationError(reason=f"inference_period_ticks must be >= 1, got {inference_period_ticks}")
    if total_ticks < 0:
        raise ConfigurationError(reason=f"total_ticks must be >= 0, got {total_ticks}")
    if len(policy_outputs) == 0:
        raise ConfigurationError(reason="policy output sequence is empty")

    if isinstance(policy_outputs, np.ndarray):
        outputs = np.atleast_2d(policy_outputs)
        timed = [(k * inference_period_ticks, outputs[k]) for k in range(outputs.shape[0])]
    else:
        timed = [(int(tick), np.asarray(value, dtype=np.float64)) for tick, value in policy_outputs]

    dim = timed[0][1].shape[0]
    held = np.zeros((total_ticks, dim))
    for k, (tick, value) in enumerate(timed):
        if k and tick < timed[k - 1][0]:
            raise ConfigurationError(reason="policy output ticks must be non-decreasing")
        end = timed[k + 1][0] if k + 1 < len(timed) else total_ticks
        held[max(tick, 0):max(min(end, total_ticks), 0)] = value
    return held


def run_filtered(
    policy_outputs: Sequence[tuple[int, np.ndarray]] | np.ndarray,
    inference_period_ticks: int,
    total_ticks: int,
    config: FilterConfig | None = None,
) -> np.ndarray:
    """
    Zero-order hold the policy outputs and filter them tick by tick.

    :return: (total_ticks, d) array of F_ff, one row per 1 kHz tick.
    """
    held = zero_order_hold(policy_outputs, inference_period_ticks, total_ticks)
    wrench_filter = WrenchFilter(config, dim=held.shape[1])
    out = np.empty_like(held)
    for tick in range(total_ticks):
        out[tick] = wrench_filter.update(held[tick])
    return out


class LatestValueSlot(Generic[T]):
    """
    Single-producer single-consumer slot keeping only the newest value.

    Neither side ever waits for the other beyond the short critical section.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._value: T | None = None
        self._stamp: int = -1
        self._version: int = 0

    def put(self, value: T, stamp: int) -> None:
        with self._lock:
            self._value = value
            self._stamp = stamp
            self._version += 1

    def get(self) -> tuple[T | None, int, int]:
        """Return (value, stamp, version); version increments on every put."""
        with self._lock:
            return self._value, self._stamp, self._version

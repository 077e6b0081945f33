from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from app.utils.exceptions import ConfigurationError

CONTROL_HZ = 1000.0
DEFAULT_LATENCY_TICKS = 7

# Reference inference frequencies of the four model sizes, in Hz.
REFERENCE_INFERENCE_HZ: dict[int, float] = {128: 503.8, 256: 297.5, 512: 141.8, 1024: 51.2}


class LatencyMode(str, Enum):
    SIMULATED = "simulated"
    LIVE = "live"


class PeriodSource(str, Enum):
    FIXED = "fixed"
    MEASURED = "measured"
    TABLE = "table"


def period_from_hz(hz: float) -> int:
    """Control ticks per inference for a policy running at ``hz``, at least one."""
    if hz <= 0:
        raise ConfigurationError(reason=f"inference frequency must be positive, got {hz}")
    return max(1, int(round(CONTROL_HZ / hz)))


def table_period(width: int) -> int:
    if width not in REFERENCE_INFERENCE_HZ:
        raise ConfigurationError(
            reason=f"no reference inference frequency for width {width}; known widths {sorted(REFERENCE_INFERENCE_HZ)}"
        )
    return period_from_hz(REFERENCE_INFERENCE_HZ[width])


@dataclass(frozen=True)
class LatencyModel:
    """
    How often the policy runs and when its output takes effect.

    Attributes:
    - inference_period_ticks (int): Ticks between inference starts.
    - mode (LatencyMode): Deterministic scheduler or real threads.
    - compute_delay_ticks (int | None): Ticks until a result becomes active; defaults to the period.
    - prev_offset_ticks (int | None): Age of o_prev relative to o_curr; defaults to the period.
    """
    inference_period_ticks: int = DEFAULT_LATENCY_TICKS
    mode: LatencyMode = LatencyMode.SIMULATED
    compute_delay_ticks: int | None = None
    prev_offset_ticks: int | None = None

    def __post_init__(self) -> None:
        if self.inference_period_ticks < 1:
            raise ConfigurationError(reason=f"inference_period_ticks must be >= 1, got {self.inference_period_ticks}")
        if self.compute_delay_ticks is not None and self.compute_delay_ticks < 0:
            raise ConfigurationError(reason="compute_delay_ticks must be >= 0")
        if self.prev_offset_ticks is not None and self.prev_offset_ticks < 1:
            raise ConfigurationError(reason="prev_offset_ticks must be >= 1")
        object.__setattr__(self, "mode", LatencyMode(self.mode))

    @property
    def delay(self) -> int:
        return self.inference_period_ticks if self.compute_delay_ticks is None else self.compute_delay_ticks

    @property
    def prev_offset(self) -> int:
        return self.inference_period_ticks if self.prev_offset_ticks is None else self.prev_offset_ticks

    @classmethod
    def expert_baseline(cls) -> "LatencyModel":
        """The 1 kHz expert acts on every tick without delay."""
        return cls(inference_period_ticks=1, compute_delay_ticks=0)

    @classmethod
    def from_hz(cls, hz: float, mode: LatencyMode = LatencyMode.SIMULATED) -> "LatencyModel":
        return cls(inference_period_ticks=period_from_hz(hz), mode=mode)

from .latency import LatencyMode, LatencyModel, PeriodSource, period_from_hz, table_period
from .report import EvalReport, aggregate, config_fingerprint
from .rollout import EXPERT_POLICY, EpisodeResult, RolloutJob, run_episode

__all__ = [
    "LatencyMode",
    "LatencyModel",
    "PeriodSource",
    "period_from_hz",
    "table_period",
    "EvalReport",
    "aggregate",
    "config_fingerprint",
    "EXPERT_POLICY",
    "EpisodeResult",
    "RolloutJob",
    "run_episode",
]

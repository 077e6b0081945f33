from .environment import EpisodeConfig, PegInHoleEnv, TaskGeometry, TASK_PRESETS, TRAINING_TASK, make_task
from .expert import ExpertConfig, collect_demonstrations
from .plant import ControllerGains, SafetyLimits, default_gains, desk_model

__all__ = [
    "EpisodeConfig",
    "PegInHoleEnv",
    "TaskGeometry",
    "TASK_PRESETS",
    "TRAINING_TASK",
    "make_task",
    "ExpertConfig",
    "collect_demonstrations",
    "ControllerGains",
    "SafetyLimits",
    "default_gains",
    "desk_model",
]

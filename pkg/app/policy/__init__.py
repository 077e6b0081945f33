from .bundle import ModelBundle, load_bundle, save_bundle
from .ddpm import ScheduleConfig, VarianceSchedule, build_schedule, sample
from .ds_filter import FilterConfig, LatestValueSlot, WrenchFilter, filter_step, run_filtered
from .noise_net import NetConfig, NetParams, TrainConfig, forward, init_params, train
from .runtime import DiffusionPolicy

__all__ = [
    "ModelBundle",
    "load_bundle",
    "save_bundle",
    "ScheduleConfig",
    "VarianceSchedule",
    "build_schedule",
    "sample",
    "FilterConfig",
    "LatestValueSlot",
    "WrenchFilter",
    "filter_step",
    "run_filtered",
    "NetConfig",
    "NetParams",
    "TrainConfig",
    "forward",
    "init_params",
    "train",
    "DiffusionPolicy",
]

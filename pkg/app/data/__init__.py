from .dataset import build_training_pairs, compute_norm_stats, read_dataset, split, write_dataset
from .models import (
    Dataset,
    EpisodeOutcome,
    EpisodeRecord,
    NormStats,
    TerminationReason,
    TrainingPairs,
    denormalize,
    normalize,
)

__all__ = [
    "build_training_pairs",
    "compute_norm_stats",
    "read_dataset",
    "split",
    "write_dataset",
    "Dataset",
    "EpisodeOutcome",
    "EpisodeRecord",
    "NormStats",
    "TerminationReason",
    "TrainingPairs",
    "denormalize",
    "normalize",
]

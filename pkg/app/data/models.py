from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, Field

OBS_DIM = 18
ACTION_DIM = 6
ROW_DIM = OBS_DIM + ACTION_DIM
STD_FLOOR = 1e-6
SCHEMA_VERSION = 1


class TerminationReason(str, Enum):
    INSERTED = "inserted"
    TIMEOUT = "timeout"
    SAFETY_ABORT = "safety_abort"


@dataclass(frozen=True)
class EpisodeOutcome:
    """Terminal status of one insertion episode."""

    success: bool
    duration: float
    termination_reason: TerminationReason
    detail: str | None = None

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "duration": self.duration,
            "termination_reason": self.termination_reason.value,
            "detail": self.detail,
        }


@dataclass
class EpisodeRecord:
    """
    One recorded 1 kHz episode.

    Attributes:
    - task_name (str): Geometry preset the episode ran on.
    - seed (int): Seed that reproduces the episode.
    - observations (np.ndarray): (L, 18) observation rows.
    - actions (np.ndarray): (L, 6) executed feed-forward wrenches.
    - outcome (EpisodeOutcome): How the episode ended.
    """
    task_name: str
    seed: int
    observations: np.ndarray
    actions: np.ndarray
    outcome: EpisodeOutcome

    @property
    def tick_count(self) -> int:
        return int(self.observations.shape[0])

    @property
    def rows(self) -> np.ndarray:
        """(L, 24) matrix of observation and action columns."""
        return np.hstack([self.observations, self.actions])


def normalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - mean) / std


def denormalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * std + mean


@dataclass(frozen=True)
class NormStats:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    def normalize_obs(self, obs: np.ndarray) -> np.ndarray:
        return normalize(obs, self.obs_mean, self.obs_std)

    def denormalize_obs(self, obs: np.ndarray) -> np.ndarray:
        return denormalize(obs, self.obs_mean, self.obs_std)

    def normalize_action(self, action: np.ndarray) -> np.ndarray:
        return normalize(action, self.action_mean, self.action_std)

    def denormalize_action(self, action: np.ndarray) -> np.ndarray:
        return denormalize(action, self.action_mean, self.action_std)

    def to_model(self) -> "NormStatsModel":
        return NormStatsModel(
            obs_mean=self.obs_mean.tolist(),
            obs_std=self.obs_std.tolist(),
            action_mean=self.action_mean.tolist(),
            action_std=self.action_std.tolist(),
        )

    @classmethod
    def from_model(cls, model: "NormStatsModel") -> "NormStats":
        return cls(
            obs_mean=np.asarray(model.obs_mean, dtype=np.float64),
            obs_std=np.asarray(model.obs_std, dtype=np.float64),
            action_mean=np.asarray(model.action_mean, dtype=np.float64),
            action_std=np.asarray(model.action_std, dtype=np.float64),
        )


class TrainingPairs(NamedTuple):
    """Normalized conditioning vectors (M, 2*obs_dim) and target actions (M, action_dim)."""

    obs: np.ndarray
    actions: np.ndarray

    def __len__(self) -> int:  # type: ignore[override]
        return int(self.obs.shape[0])


class NormStatsModel(BaseModel):
    obs_mean: list[float]
    obs_std: list[float]
    action_mean: list[float]
    action_std: list[float]


class EpisodeEntry(BaseModel):
    """Manifest line describing one episode file."""

    file: str
    seed: int
    tick_count: int = Field(ge=1)
    sha256: str = Field(min_length=64, max_length=64)
    success: bool
    duration: float
    termination_reason: TerminationReason


class DatasetManifest(BaseModel):
    schema_version: int
    task_name: str
    tick_seconds: float = 0.001
    obs_dim: int = OBS_DIM
    action_dim: int = ACTION_DIM
    total_rows: int
    episodes: list[EpisodeEntry] = Field(default_factory=list)
    norm_stats: NormStatsModel
    metadata: dict[str, str | int | float | bool] = Field(default_factory=dict)


@dataclass
class Dataset:
    """Records loaded from disk plus the manifest they came with."""

    records: list[EpisodeRecord]
    manifest: DatasetManifest
    norm_stats: NormStats = field(init=False)

    def __post_init__(self) -> None:
        self.norm_stats = NormStats.from_model(self.manifest.norm_stats)

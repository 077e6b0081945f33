from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from app.data.models import OBS_DIM
from app.utils.exceptions import DimensionMismatchError

from .bundle import ModelBundle
from .ddpm import SampleResult, sample


@dataclass
class DiffusionPolicy:
    """
    Inference wrapper around a model bundle: normalizes (o_curr, o_prev), runs the
    reverse chain and returns the wrench in physical units.
    """
    bundle: ModelBundle

    @property
    def history_ticks(self) -> int:
        return self.bundle.history_ticks

    def condition(self, o_curr: np.ndarray, o_prev: np.ndarray) -> np.ndarray:
        o_curr = np.asarray(o_curr, dtype=np.float64)
        o_prev = np.asarray(o_prev, dtype=np.float64)
        if o_curr.shape[-1] != OBS_DIM or o_prev.shape[-1] != OBS_DIM:
            raise DimensionMismatchError(where="policy observation", expected=OBS_DIM, actual=(o_curr.shape, o_prev.shape))
        stats = self.bundle.norm_stats
        return np.concatenate([stats.normalize_obs(o_curr), stats.normalize_obs(o_prev)], axis=-1)

    def sample(self, o_curr: np.ndarray, o_prev: np.ndarray, rng: np.random.Generator, trace: bool = False) -> SampleResult:
        return sample(
            self.condition(o_curr, o_prev),
            self.bundle.params,
            self.bundle.schedule,
            rng,
            action_dim=self.bundle.params.config.action_dim,
            denormalize=self.bundle.norm_stats.denormalize_action,
            trace=trace,
        )

    def act(self, o_curr: np.ndarray, o_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Raw diffusion output F_df for one inference."""
        return self.sample(o_curr, o_prev, rng).action

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from app.data.models import ACTION_DIM, OBS_DIM, EpisodeOutcome, EpisodeRecord, TerminationReason  # noqa: E402
from app.data.dataset import compute_norm_stats  # noqa: E402
from app.policy.bundle import ModelBundle, save_bundle  # noqa: E402
from app.policy.ddpm import build_schedule  # noqa: E402
from app.policy.noise_net import NetConfig, init_params  # noqa: E402


def make_record(seed: int, ticks: int = 40, task_name: str = "cuboid") -> EpisodeRecord:
    rng = np.random.default_rng(seed)
    observations = rng.normal(0.0, 2.0, size=(ticks, OBS_DIM))
    actions = np.column_stack(
        [
            rng.normal(0.0, 3.0, size=ticks),
            np.zeros(ticks),
            np.full(ticks, -10.0) + rng.normal(0.0, 0.5, size=ticks),
            np.zeros(ticks),
            rng.normal(0.0, 0.2, size=ticks),
            np.zeros(ticks),
        ]
    )
    outcome = EpisodeOutcome(success=True, duration=ticks * 0.001, termination_reason=TerminationReason.INSERTED)
    return EpisodeRecord(task_name=task_name, seed=seed, observations=observations, actions=actions, outcome=outcome)


@pytest.fixture
def records() -> list[EpisodeRecord]:
    return [make_record(seed) for seed in range(4)]


@pytest.fixture
def tiny_bundle(records: list[EpisodeRecord]) -> ModelBundle:
    config = NetConfig(width=8, num_residual_blocks=1, obs_dim=2 * OBS_DIM, action_dim=ACTION_DIM)
    return ModelBundle(
        params=init_params(config, np.random.default_rng(3)),
        schedule=build_schedule(5, 1e-3, 0.2),
        norm_stats=compute_norm_stats(records),
        history_ticks=7,
        task_name="cuboid",
        fingerprint="f" * 64,
    )


@pytest.fixture
def tiny_bundle_path(tiny_bundle: ModelBundle, tmp_path: Path) -> Path:
    return save_bundle(tiny_bundle, tmp_path / "tiny.npz")

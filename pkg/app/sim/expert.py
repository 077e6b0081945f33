"""
Scripted primitive-switching insertion expert used to record demonstrations.

Phases:

- ``align_wiggle``: sinusoidal lateral force and tilt torque on top of a downward bias,
  plus proportional centering from the robot's own pose
- ``push``: pure downward force
- ``stuck_recovery``: the wiggle with doubled amplitudes for a fixed number of ticks

Any phase except ``stuck_recovery`` switches to it when depth progress over the last
window is below the threshold.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import NamedTuple

import numpy as np

from app.data.models import ACTION_DIM, OBS_DIM, EpisodeRecord
from app.utils.exceptions import ExpertValidityError
from app.utils.parallel import map_ordered

from .environment import EpisodeConfig, PegInHoleEnv, TaskGeometry
from .plant import TICK_SECONDS, SafetyLimits, clamp_wrench

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    ALIGN_WIGGLE = "align_wiggle"
    PUSH = "push"
    STUCK_RECOVERY = "stuck_recovery"


@dataclass(frozen=True)
class ExpertConfig:
    """
    Attributes:
    - wiggle_force (float): Lateral force amplitude, N.
    - wiggle_torque (float): Tilt torque amplitude, N m.
    - wiggle_hz (float): Wiggle frequency.
    - align_down_force (float): Downward bias while aligning, N.
    - push_force (float): Downward force in the push phase, N.
    - recovery_gain (float): Amplitude multiplier in stuck recovery.
    - recovery_ticks (int): Duration of stuck recovery.
    - stuck_window (int): Ticks over which depth progress is measured.
    - stuck_progress (float): Minimum depth progress over the window, m.
    - align_tilt (float): Tilt below which pushing may start, rad.
    - align_lateral_force (float): Lateral contact force below which pushing may start, N.
    - engage_depth (float): Depth below the entrance at which pushing may start, m.
    - centering_gain (float): Lateral force per metre of offset while aligning.
    - tilt_gain (float): Torque per radian of tilt while aligning.
    - min_success_rate (float): Fraction of successful attempts collection requires.
    - attempt_budget (float): Attempts allowed per requested episode.
    """
    wiggle_force: float = 4.0
    wiggle_torque: float = 0.4
    wiggle_hz: float = 4.0
    align_down_force: float = 10.0
    push_force: float = 15.0
    recovery_gain: float = 2.0
    recovery_ticks: int = 500
    stuck_window: int = 500
    stuck_progress: float = 1e-4
    align_tilt: float = 0.02
    align_lateral_force: float = 6.0
    engage_depth: float = 3e-4
    centering_gain: float = 1500.0
    tilt_gain: float = 2.0
    min_success_rate: float = 0.9
    attempt_budget: float = 2.0


class Proprioception(NamedTuple):
    """Pose of the peg relative to the hole entrance, known to the expert only."""

    depth: float
    lateral: float
    tilt: float


@dataclass(frozen=True)
class ExpertPhase:
    phase: Phase
    phase_entry_tick: int
    progress_window: tuple[float, ...] = ()
    wiggle_offset: float = 0.0

    @classmethod
    def initial(cls, rng: np.random.Generator, tick: int = 0) -> "ExpertPhase":
        return cls(phase=Phase.ALIGN_WIGGLE, phase_entry_tick=tick, wiggle_offset=float(rng.uniform(0.0, 2 * math.pi)))


def _enter(phase: Phase, tick: int, rng: np.random.Generator) -> ExpertPhase:
    return ExpertPhase(phase=phase, phase_entry_tick=tick, wiggle_offset=float(rng.uniform(0.0, 2 * math.pi)))


def next_phase(
    obs: np.ndarray,
    pose: Proprioception,
    phase: ExpertPhase,
    tick: int,
    rng: np.random.Generator,
    config: ExpertConfig,
) -> ExpertPhase:
    """Successor of ``phase`` after observing ``obs`` at ``tick``; every input has exactly one."""
    window = (*phase.progress_window, pose.depth)[-(config.stuck_window + 1):]
    current = replace(phase, progress_window=window)

    if current.phase is Phase.STUCK_RECOVERY:
        if tick - current.phase_entry_tick >= config.recovery_ticks:
            return _enter(Phase.ALIGN_WIGGLE, tick, rng)
        return current

    if len(window) > config.stuck_window and window[-1] - window[0] < config.stuck_progress:
        return _enter(Phase.STUCK_RECOVERY, tick, rng)

    if current.phase is Phase.ALIGN_WIGGLE:
        lateral_force = abs(float(obs[0]))
        if (
            abs(pose.tilt) < config.align_tilt
            and lateral_force < config.align_lateral_force
            and pose.depth >= config.engage_depth
        ):
            return _enter(Phase.PUSH, tick, rng)
        return current

    if pose.depth < config.engage_depth:
        return _enter(Phase.ALIGN_WIGGLE, tick, rng)
    return current


def phase_wrench(phase: ExpertPhase, pose: Proprioception, tick: int, config: ExpertConfig) -> np.ndarray:
    if phase.phase is Phase.PUSH:
        return np.array([0.0, 0.0, -config.push_force, 0.0, 0.0, 0.0])

    gain = config.recovery_gain if phase.phase is Phase.STUCK_RECOVERY else 1.0
    t = (tick - phase.phase_entry_tick) * TICK_SECONDS
    angle = 2 * math.pi * config.wiggle_hz * t + phase.wiggle_offset
    fx = -config.centering_gain * pose.lateral + gain * config.wiggle_force * math.sin(angle)
    ty = -config.tilt_gain * pose.tilt + gain * config.wiggle_torque * math.cos(angle)
    return np.array([fx, 0.0, -config.align_down_force, 0.0, ty, 0.0])


def expert_action(
    obs: np.ndarray,
    phase: ExpertPhase,
    tick: int,
    rng: np.random.Generator,
    pose: Proprioception,
    config: ExpertConfig | None = None,
    limits: SafetyLimits | None = None,
) -> tuple[np.ndarray, ExpertPhase]:
    """
    Feed-forward wrench for one 1 kHz tick and the updated phase.

    :param obs: Current 18-dim observation.
    :param phase: Phase state from the previous tick.
    :param tick: Control tick index.
    :param rng: Generator used for the wiggle offset on phase entry.
    :param pose: Depth, lateral offset and tilt relative to the hole entrance.
    :return: Clamped wrench and the successor phase.
    """
    config = config or ExpertConfig()
    new_phase = next_phase(obs, pose, phase, tick, rng, config)
    wrench = clamp_wrench(phase_wrench(new_phase, pose, tick, config), limits or SafetyLimits())
    return wrench, new_phase


class ExpertEpisode(NamedTuple):
    """Picklable description of one expert rollout."""

    geom: TaskGeometry
    seed: int
    attempt: int
    expert_config: ExpertConfig
    episode_config: EpisodeConfig


def run_expert_episode(job: ExpertEpisode) -> EpisodeRecord:
    """Roll the expert out once and record (o_t, a_t) for every tick until termination."""
    rng = np.random.default_rng([job.seed, job.attempt])
    env = PegInHoleEnv(job.geom, job.episode_config)
    obs = env.reset(rng)
    phase = ExpertPhase.initial(rng)
    max_ticks = int(round(job.episode_config.timeout_s / job.episode_config.dt)) + 1
    observations = np.empty((max_ticks, OBS_DIM))
    actions = np.empty((max_ticks, ACTION_DIM))

    tick = 0
    outcome = None
    while outcome is None:
        x = env.state.robot.x
        pose = Proprioception(depth=env.depth, lateral=float(x[0]), tilt=float(x[4]))
        action, phase = expert_action(obs, phase, tick, rng, pose, job.expert_config, env.limits)
        observations[tick] = obs
        actions[tick] = action
        obs = env.step(action)
        tick += 1
        outcome = env.outcome()

    return EpisodeRecord(
        task_name=job.geom.name,
        seed=job.seed * 1_000_003 + job.attempt,
        observations=observations[:tick].copy(),
        actions=actions[:tick].copy(),
        outcome=outcome,
    )


def collect_demonstrations(
    n_episodes: int,
    geom: TaskGeometry,
    seed: int,
    expert_config: ExpertConfig | None = None,
    episode_config: EpisodeConfig | None = None,
    workers: int = 1,
) -> list[EpisodeRecord]:
    """
    Run the expert until ``n_episodes`` successful episodes are recorded.

    Attempts are seeded ``[seed, attempt]`` and consumed in attempt order, so the result
    does not depend on ``workers``.

    :raises ExpertValidityError: the attempt budget ran out or the success rate fell below
        ``min_success_rate``.
    """
    expert_config = expert_config or ExpertConfig()
    episode_config = episode_config or EpisodeConfig()
    budget = max(n_episodes, int(math.ceil(n_episodes * expert_config.attempt_budget)))

    kept: list[EpisodeRecord] = []
    attempts = 0
    while len(kept) < n_episodes and attempts < budget:
        batch = min(budget - attempts, max(workers, n_episodes - len(kept)))
        jobs = [ExpertEpisode(geom, seed, attempts + i, expert_config, episode_config) for i in range(batch)]
        for record in map_ordered(run_expert_episode, jobs, workers):
            attempts += 1
            logger.debug(
                "attempt=%s success=%s duration=%.3f reason=%s",
                attempts - 1, record.outcome.success, record.outcome.duration, record.outcome.termination_reason.value,
            )
            if record.outcome.success:
                kept.append(record)
                if len(kept) == n_episodes:
                    break

    rate = len(kept) / attempts if attempts else 0.0
    if len(kept) < n_episodes:
        raise ExpertValidityError(successes=len(kept), attempts=attempts, reason="attempt budget exhausted")
    if rate < expert_config.min_success_rate:
        raise ExpertValidityError(
            successes=len(kept), attempts=attempts,
            reason=f"success rate {rate:.3f} below {expert_config.min_success_rate}",
        )
    logger.info("Collected episodes=%s attempts=%s success_rate=%.3f task=%s", len(kept), attempts, rate, geom.name)
    return kept

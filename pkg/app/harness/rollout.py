"""
Closed-loop evaluation episodes.

Per control tick: every ``inference_period_ticks`` the policy is queried with
(o_curr, o_prev); its output F_df becomes active ``delay`` ticks later and is held
until replaced; the filter (or pass-through) turns the held F_df into F_ff; the
environment executes one impedance-control tick.
"""
from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np
from cachetools import LRUCache, cached

from app.data.models import ACTION_DIM, OBS_DIM, EpisodeOutcome, TerminationReason
from app.policy.bundle import load_bundle
from app.policy.ds_filter import FilterConfig, LatestValueSlot, WrenchFilter
from app.policy.runtime import DiffusionPolicy
from app.sim.environment import CONTACT_NAMES, EpisodeConfig, PegInHoleEnv, TaskGeometry
from app.sim.expert import ExpertConfig, ExpertPhase, Proprioception, expert_action
from app.utils.exceptions import NonFiniteValueError, PlantDivergenceError

from .latency import LatencyMode, LatencyModel

logger = logging.getLogger(__name__)

EXPERT_POLICY = "expert"
TRACE_COLUMNS = [
    "tick",
    *[f"o{i}" for i in range(OBS_DIM)],
    *[f"f_ff{i}" for i in range(ACTION_DIM)],
    *[f"f_df{i}" for i in range(ACTION_DIM)],
    *[f"contact_{name}" for name in CONTACT_NAMES],
]


class Controller(Protocol):
    def infer(self, o_curr: np.ndarray, o_prev: np.ndarray, pose: Proprioception, tick: int) -> np.ndarray: ...


class DiffusionController:
    def __init__(self, policy: DiffusionPolicy, rng: np.random.Generator) -> None:
        self.policy = policy
        self.rng = rng

    def infer(self, o_curr: np.ndarray, o_prev: np.ndarray, pose: Proprioception, tick: int) -> np.ndarray:
        return self.policy.act(o_curr, o_prev, self.rng)


class ExpertController:
    """The scripted expert behind the same interface, used as the comparison baseline."""

    def __init__(self, config: ExpertConfig, rng: np.random.Generator) -> None:
        self.config = config
        self.rng = rng
        self.phase = ExpertPhase.initial(rng)

    def infer(self, o_curr: np.ndarray, o_prev: np.ndarray, pose: Proprioception, tick: int) -> np.ndarray:
        action, self.phase = expert_action(o_curr, self.phase, tick, self.rng, pose, self.config)
        return action


@cached(LRUCache(maxsize=8))
def _load_policy(path: str) -> DiffusionPolicy:
    return DiffusionPolicy(load_bundle(path))


class RolloutJob(NamedTuple):
    """Picklable description of one evaluation trial."""

    policy: str
    geom: TaskGeometry
    episode_config: EpisodeConfig
    latency: LatencyModel
    filter_config: FilterConfig
    seed: int
    pose_index: int
    trial: int
    record_trace: bool = False
    expert_config: ExpertConfig = ExpertConfig()


@dataclass
class EpisodeResult:
    task_name: str
    pose_index: int
    trial: int
    outcome: EpisodeOutcome
    ticks: int
    trace: np.ndarray | None = field(default=None, repr=False)


def _make_controller(job: RolloutJob, rng: np.random.Generator) -> Controller:
    if job.policy == EXPERT_POLICY:
        return ExpertController(job.expert_config, rng)
    return DiffusionController(_load_policy(str(Path(job.policy))), rng)


def _pose(env: PegInHoleEnv) -> Proprioception:
    x = env.state.robot.x
    return Proprioception(depth=env.depth, lateral=float(x[0]), tilt=float(x[4]))


def _abort(env: PegInHoleEnv, exc: Exception) -> EpisodeOutcome:
    return EpisodeOutcome(
        success=False,
        duration=min(env.elapsed, env.config.timeout_s),
        termination_reason=TerminationReason.SAFETY_ABORT,
        detail=str(exc),
    )


def run_episode(job: RolloutJob) -> EpisodeResult:
    """
    One trial in simulated-latency mode, a deterministic function of the job.

    The initial pose depends on (seed, pose_index) only, so every trial of a pose starts
    identically; policy sampling noise depends on (seed, pose_index, trial).
    """
    if job.latency.mode is LatencyMode.LIVE:
        return run_live_episode(job)

    env = PegInHoleEnv(job.geom, job.episode_config)
    obs = env.reset(np.random.default_rng([job.seed, job.pose_index]))
    controller = _make_controller(job, np.random.default_rng([job.seed, job.pose_index, job.trial]))
    wrench_filter = WrenchFilter(job.filter_config)
    latency = job.latency
    period, delay, offset = latency.inference_period_ticks, latency.delay, latency.prev_offset

    history: deque[np.ndarray] = deque([obs] * (offset + 1), maxlen=offset + 1)
    pending: deque[tuple[int, np.ndarray]] = deque()
    f_df = np.zeros(ACTION_DIM)
    max_ticks = int(round(job.episode_config.timeout_s / job.episode_config.dt)) + 1
    trace = np.zeros((max_ticks, len(TRACE_COLUMNS))) if job.record_trace else None

    tick = 0
    outcome = None
    try:
        while outcome is None:
            if tick % period == 0:
                pending.append((tick + delay, controller.infer(history[-1], history[0], _pose(env), tick)))
            while pending and pending[0][0] <= tick:
                f_df = pending.popleft()[1]
            f_ff = wrench_filter.update(f_df)
            if trace is not None:
                trace[tick, 0] = tick
                trace[tick, 1:1 + OBS_DIM] = history[-1]
                trace[tick, 1 + OBS_DIM:1 + OBS_DIM + ACTION_DIM] = f_ff
                trace[tick, 1 + OBS_DIM + ACTION_DIM:1 + OBS_DIM + 2 * ACTION_DIM] = f_df
            obs = env.step(f_ff)
            if trace is not None:
                trace[tick, 1 + OBS_DIM + 2 * ACTION_DIM:] = env.state.contact.flags
            history.append(obs)
            tick += 1
            outcome = env.outcome()
    except (NonFiniteValueError, PlantDivergenceError) as exc:
        logger.debug("Episode aborted pose=%s trial=%s: %s", job.pose_index, job.trial, exc)
        outcome = _abort(env, exc)

    return EpisodeResult(
        task_name=job.geom.name,
        pose_index=job.pose_index,
        trial=job.trial,
        outcome=outcome,
        ticks=tick,
        trace=None if trace is None else trace[:tick].copy(),
    )


def run_live_episode(job: RolloutJob) -> EpisodeResult:
    """
    One trial with real concurrent inference paced at 1 kHz wall-clock time.

    The control thread publishes (o_curr, o_prev) every tick and reads the newest
    F_df without waiting; the inference thread always works on the newest observation
    pair. Results depend on machine timing and are not reproducible bit for bit.
    """
    env = PegInHoleEnv(job.geom, job.episode_config)
    obs = env.reset(np.random.default_rng([job.seed, job.pose_index]))
    controller = _make_controller(job, np.random.default_rng([job.seed, job.pose_index, job.trial]))
    wrench_filter = WrenchFilter(job.filter_config)
    offset = job.latency.prev_offset
    history: deque[np.ndarray] = deque([obs] * (offset + 1), maxlen=offset + 1)

    observation_slot: LatestValueSlot[tuple[np.ndarray, np.ndarray, Proprioception]] = LatestValueSlot()
    action_slot: LatestValueSlot[np.ndarray] = LatestValueSlot()
    stop = threading.Event()
    failure: list[Exception] = []

    def inference_loop() -> None:
        seen = 0
        while not stop.is_set():
            value, stamp, version = observation_slot.get()
            if value is None or version == seen:
                time.sleep(1e-4)
                continue
            seen = version
            try:
                action_slot.put(controller.infer(value[0], value[1], value[2], stamp), stamp)
            except Exception as exc:  # surfaced to the control thread
                failure.append(exc)
                stop.set()

    worker = threading.Thread(target=inference_loop, name="inference", daemon=True)
    worker.start()
    dt = job.episode_config.dt
    tick = 0
    outcome = None
    deadline = time.perf_counter()
    try:
        while outcome is None:
            if failure:
                raise failure[0]
            observation_slot.put((history[-1], history[0], _pose(env)), tick)
            f_df, _, _ = action_slot.get()
            f_ff = wrench_filter.update(np.zeros(ACTION_DIM) if f_df is None else f_df)
            obs = env.step(f_ff)
            history.append(obs)
            tick += 1
            outcome = env.outcome()
            deadline += dt
            pause = deadline - time.perf_counter()
            if pause > 0:
                time.sleep(pause)
    except (NonFiniteValueError, PlantDivergenceError) as exc:
        outcome = _abort(env, exc)
    finally:
        stop.set()
        worker.join(timeout=1.0)

    return EpisodeResult(task_name=job.geom.name, pose_index=job.pose_index, trial=job.trial, outcome=outcome, ticks=tick)

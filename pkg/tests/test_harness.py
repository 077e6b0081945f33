from pathlib import Path

import numpy as np
import pytest

from app.data.models import ACTION_DIM, OBS_DIM, EpisodeOutcome, TerminationReason
from app.harness.commands import evaluate
from app.harness.latency import LatencyModel, period_from_hz, table_period
from app.harness.report import (
    EvalReport,
    aggregate,
    config_fingerprint,
    efficiency_ranking,
    filter_effect,
    success_table,
)
from app.harness.rollout import EXPERT_POLICY, TRACE_COLUMNS, EpisodeResult, RolloutJob, run_episode
from app.policy.ds_filter import FilterConfig
from app.sim.environment import EpisodeConfig, make_task
from app.utils.exceptions import ConfigurationError, EmptyDatasetError

F_FF = slice(1 + OBS_DIM, 1 + OBS_DIM + ACTION_DIM)
F_DF = slice(1 + OBS_DIM + ACTION_DIM, 1 + OBS_DIM + 2 * ACTION_DIM)
SHORT = EpisodeConfig(timeout_s=0.2)


def result(pose: int, trial: int, success: bool, duration: float) -> EpisodeResult:
    reason = TerminationReason.INSERTED if success else TerminationReason.TIMEOUT
    return EpisodeResult("cuboid", pose, trial, EpisodeOutcome(success, duration, reason), int(duration * 1000))


def report(policy: str, task: str, outcomes: list[bool], filter_enabled: bool = True) -> EvalReport:
    results = [result(pose, 0, success, 2.0) for pose, success in enumerate(outcomes)]
    return aggregate(results, policy, task, 7, filter_enabled, {"policy": policy})


def expert_job(period: int, filter_config: FilterConfig, **overrides) -> RolloutJob:
    job = RolloutJob(
        policy=EXPERT_POLICY,
        geom=make_task("cuboid"),
        episode_config=SHORT,
        latency=LatencyModel(inference_period_ticks=period),
        filter_config=filter_config,
        seed=1,
        pose_index=0,
        trial=0,
        record_trace=True,
    )
    return job._replace(**overrides)


@pytest.mark.parametrize(("width", "ticks"), [(128, 2), (256, 3), (512, 7), (1024, 20)])
def test_table_periods(width: int, ticks: int) -> None:
    assert table_period(width) == ticks


def test_period_from_hz() -> None:
    assert period_from_hz(1000.0) == 1
    assert period_from_hz(5000.0) == 1
    assert period_from_hz(141.8) == 7
    with pytest.raises(ConfigurationError):
        period_from_hz(0.0)
    with pytest.raises(ConfigurationError):
        table_period(300)


def test_latency_defaults() -> None:
    latency = LatencyModel()
    baseline = LatencyModel.expert_baseline()

    assert (latency.inference_period_ticks, latency.delay, latency.prev_offset) == (7, 7, 7)
    assert (baseline.inference_period_ticks, baseline.delay) == (1, 0)
    assert LatencyModel(inference_period_ticks=5, compute_delay_ticks=2).delay == 2
    with pytest.raises(ConfigurationError):
        LatencyModel(inference_period_ticks=0)


def test_aggregate_statistics() -> None:
    results = [result(0, 0, True, 1.0), result(0, 1, False, 2.0), result(1, 0, True, 3.0), result(1, 1, True, 4.0)]

    report = aggregate(results, "model", "cuboid", 7, True, {"seed": 0})

    assert report.trials == 4
    assert report.successes == 3
    assert report.success_rate == 75.0
    assert report.pose_success_rate == 100.0
    assert report.time_mean == 2.5
    assert report.time_median == 2.5
    assert report.time_p25 == pytest.approx(1.75)
    assert report.time_p75 == pytest.approx(3.25)
    assert report.efficiency == pytest.approx(30.0)
    assert EvalReport.from_json(report.to_json()) == report


def test_aggregate_needs_results() -> None:
    with pytest.raises(EmptyDatasetError):
        aggregate([], "model", "cuboid", 7, True, {})


def test_config_fingerprint_ignores_key_order() -> None:
    first = config_fingerprint({"a": 1, "b": {"c": [1, 2], "d": FilterConfig()}})
    second = config_fingerprint({"b": {"d": FilterConfig(), "c": [1, 2]}, "a": 1})

    assert first == second
    assert first != config_fingerprint({"a": 2, "b": {"c": [1, 2], "d": FilterConfig()}})
    assert len(first) == 64


def test_success_table_puts_trained_task_first() -> None:
    reports = [
        report("expert", "key", [True, False]),
        report("expert", "cuboid", [True, True]),
        report("df_256", "cuboid", [True, False]),
        report("df_256", "key", [False, False]),
    ]

    header, rows = success_table(reports, "cuboid")

    assert header == ["policy", "cuboid", "key", "novel_average", "average"]
    assert rows[0] == ["expert", 100.0, 50.0, 50.0, 75.0]
    assert rows[1] == ["df_256", 50.0, 0.0, 0.0, 25.0]


def test_efficiency_ranking_relative_to_baseline() -> None:
    reports = [report("expert", "cuboid", [True, False]), report("df_256", "cuboid", [True, True])]

    header, rows = efficiency_ranking(reports, "expert", "cuboid")

    assert header[-1] == "improvement_over_baseline_pct"
    assert rows[0][:4] == [1, "df_256", "cuboid", "trained"]
    assert rows[0][5] == pytest.approx(100.0)
    assert rows[1][5] is None


def test_filter_effect_counts_poses() -> None:
    on = [report("df_256", "key", [True, True, False])]
    off = [report("df_256", "key", [False, True, True], filter_enabled=False)]

    header, rows = filter_effect(on, off, "cuboid")

    assert header[6:] == ["poses_improved", "poses_unchanged", "poses_worsened"]
    assert rows[0][2] == "novel"
    assert rows[0][5] == 0.0
    assert rows[0][6:] == [1, 1, 1]
    assert rows[-1][:2] == ["all", "novel_mean"]


def test_expert_output_is_held_for_the_delay() -> None:
    episode = run_episode(expert_job(5, FilterConfig()))
    trace = episode.trace

    assert trace.shape == (episode.ticks, len(TRACE_COLUMNS))
    np.testing.assert_array_equal(trace[:5, F_DF], np.zeros((5, ACTION_DIM)))
    assert np.any(trace[5, F_DF] != 0.0)
    for tick in range(6, 10):
        np.testing.assert_array_equal(trace[tick, F_DF], trace[5, F_DF])
    # filtered force starts at rest and rises smoothly
    assert np.all(trace[:5, F_FF] == 0.0)
    assert np.abs(trace[5, F_FF]).max() < np.abs(trace[5, F_DF]).max()


def test_disabled_filter_passes_held_output() -> None:
    episode = run_episode(expert_job(3, FilterConfig(enabled=False)))

    np.testing.assert_array_equal(episode.trace[:, F_FF], episode.trace[:, F_DF])


def test_policy_episode_is_reproducible(tiny_bundle_path: Path) -> None:
    job = expert_job(7, FilterConfig(), policy=str(tiny_bundle_path), pose_index=3, trial=1)

    first = run_episode(job)
    second = run_episode(job)

    assert first.outcome == second.outcome
    np.testing.assert_array_equal(first.trace, second.trace)


def test_trials_of_a_pose_share_the_initial_observation(tiny_bundle_path: Path) -> None:
    first = run_episode(expert_job(7, FilterConfig(), policy=str(tiny_bundle_path), trial=0))
    second = run_episode(expert_job(7, FilterConfig(), policy=str(tiny_bundle_path), trial=1))

    np.testing.assert_array_equal(first.trace[0, 1:1 + OBS_DIM], second.trace[0, 1:1 + OBS_DIM])


def test_evaluate_is_deterministic(tiny_bundle_path: Path) -> None:
    first = evaluate(str(tiny_bundle_path), "key", n_poses=2, trials_per_pose=2, episode_config=SHORT)
    second = evaluate(str(tiny_bundle_path), "key", n_poses=2, trials_per_pose=2, episode_config=SHORT)

    assert first.trials == 4
    assert first.episodes == second.episodes
    assert first.config_fingerprint == second.config_fingerprint
    assert [(e.pose_index, e.trial) for e in first.episodes] == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_evaluate_rejects_empty_grid() -> None:
    with pytest.raises(ConfigurationError):
        evaluate(EXPERT_POLICY, "cuboid", n_poses=0)

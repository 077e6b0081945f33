"""Aggregation of episode outcomes into reports and their CSV/JSON exports."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from pydantic import BaseModel, Field

from app.utils.exceptions import EmptyDatasetError

from .rollout import TRACE_COLUMNS, EpisodeResult


def _plain(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return {k: _plain(v) for k, v in asdict(value).items()}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def config_fingerprint(config: dict[str, Any]) -> str:
    """SHA-256 of the canonical (sorted-key) JSON of ``config``."""
    canonical = json.dumps(_plain(config), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class EpisodeSummary(BaseModel):
    pose_index: int
    trial: int
    success: bool
    duration: float
    termination_reason: str
    detail: str | None = None


class EvalReport(BaseModel):
    """
    Result of evaluating one policy on one task.

    ``efficiency`` is the success rate (%) divided by the mean execution time (s) over all
    trials, failures included with their termination time.
    """
    policy: str
    task_name: str
    trials: int
    successes: int
    success_rate: float = Field(ge=0.0, le=100.0)
    pose_success_rate: float = Field(ge=0.0, le=100.0)
    time_median: float
    time_p25: float
    time_p75: float
    time_mean: float
    efficiency: float
    inference_period_ticks: int
    filter_enabled: bool
    config_fingerprint: str
    config: dict[str, Any] = Field(default_factory=dict)
    episodes: list[EpisodeSummary] = Field(default_factory=list)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.model_validate_json(text)


def aggregate(
    results: Sequence[EpisodeResult],
    policy: str,
    task_name: str,
    inference_period_ticks: int,
    filter_enabled: bool,
    config: dict[str, Any],
) -> EvalReport:
    if not results:
        raise EmptyDatasetError(reason="no episodes to aggregate")
    durations = np.array([r.outcome.duration for r in results], dtype=np.float64)
    successes = sum(1 for r in results if r.outcome.success)
    poses: dict[int, bool] = {}
    for r in results:
        poses[r.pose_index] = poses.get(r.pose_index, False) or r.outcome.success
    success_rate = 100.0 * successes / len(results)
    mean_time = float(durations.mean())
    plain_config = _plain(config)
    return EvalReport(
        policy=policy,
        task_name=task_name,
        trials=len(results),
        successes=successes,
        success_rate=success_rate,
        pose_success_rate=100.0 * sum(poses.values()) / len(poses),
        time_median=float(np.median(durations)),
        time_p25=float(np.percentile(durations, 25)),
        time_p75=float(np.percentile(durations, 75)),
        time_mean=mean_time,
        efficiency=success_rate / mean_time if mean_time > 0 else 0.0,
        inference_period_ticks=inference_period_ticks,
        filter_enabled=filter_enabled,
        config_fingerprint=config_fingerprint(plain_config),
        config=plain_config,
        episodes=[
            EpisodeSummary(
                pose_index=r.pose_index,
                trial=r.trial,
                success=r.outcome.success,
                duration=r.outcome.duration,
                termination_reason=r.outcome.termination_reason.value,
                detail=r.outcome.detail,
            )
            for r in results
        ],
    )


def write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if value is None else value for value in row])
    return path


def write_episodes_csv(report: EvalReport, path: Path) -> Path:
    return write_rows(
        path,
        ["pose_index", "trial", "success", "duration", "termination_reason", "detail"],
        (
            (e.pose_index, e.trial, int(e.success), repr(e.duration), e.termination_reason, e.detail)
            for e in report.episodes
        ),
    )


def write_trace_csv(result: EpisodeResult, path: Path) -> Path:
    if result.trace is None:
        raise EmptyDatasetError(reason="episode was run without trace recording")
    flags_start = len(TRACE_COLUMNS) - 5
    rows = (
        [int(row[0]), *(repr(float(v)) for v in row[1:flags_start]), *(int(v) for v in row[flags_start:])]
        for row in result.trace
    )
    return write_rows(path, TRACE_COLUMNS, rows)


def write_loss_csv(rows: Iterable[tuple[int, float, float | None]], path: Path) -> Path:
    return write_rows(path, ["epoch", "train_loss", "val_loss"], rows)


def success_table(reports: Sequence[EvalReport], trained_task: str) -> tuple[list[str], list[list[Any]]]:
    """
    Success rates with one row per policy and one column per task, trained task first,
    followed by the averages over novel tasks and over all tasks.
    """
    tasks = sorted({r.task_name for r in reports}, key=lambda name: (name != trained_task, name))
    novel = [task for task in tasks if task != trained_task]
    header = ["policy", *tasks, "novel_average", "average"]
    rows = []
    for policy in dict.fromkeys(r.policy for r in reports):
        cells = {r.task_name: r.success_rate for r in reports if r.policy == policy}
        novel_values = [cells[t] for t in novel if t in cells]
        rows.append(
            [
                policy,
                *(cells.get(task) for task in tasks),
                float(np.mean(novel_values)) if novel_values else None,
                float(np.mean(list(cells.values()))),
            ]
        )
    return header, rows


def time_table(reports: Sequence[EvalReport]) -> tuple[list[str], list[list[Any]]]:
    header = ["policy", "task", "success_rate", "time_p25", "time_median", "time_p75", "time_mean", "efficiency"]
    rows = [
        [r.policy, r.task_name, r.success_rate, r.time_p25, r.time_median, r.time_p75, r.time_mean, r.efficiency]
        for r in reports
    ]
    return header, rows


def efficiency_ranking(
    reports: Sequence[EvalReport],
    baseline: str,
    trained_task: str,
) -> tuple[list[str], list[list[Any]]]:
    """
    Every (policy, task) efficiency in descending order, with the relative improvement over
    the baseline on the same task and the task category.
    """
    base = {r.task_name: r.efficiency for r in reports if r.policy == baseline}
    ordered = sorted(reports, key=lambda r: (-r.efficiency, r.policy, r.task_name))
    rows = []
    for rank, report in enumerate(ordered, start=1):
        reference = base.get(report.task_name)
        improvement = None
        if reference is not None and reference > 0 and report.policy != baseline:
            improvement = 100.0 * (report.efficiency - reference) / reference
        category = "trained" if report.task_name == trained_task else "novel"
        rows.append([rank, report.policy, report.task_name, category, report.efficiency, improvement])
    return ["rank", "policy", "task", "category", "efficiency", "improvement_over_baseline_pct"], rows


def filter_effect(
    filtered: Sequence[EvalReport],
    unfiltered: Sequence[EvalReport],
    trained_task: str,
) -> tuple[list[str], list[list[Any]]]:
    """
    Paired comparison of filter on/off per (policy, task) with the count of poses that
    improved, stayed equal or worsened, plus per-category totals.
    """
    off = {(r.policy, r.task_name): r for r in unfiltered}
    header = [
        "policy", "task", "category", "success_filter_on", "success_filter_off", "difference",
        "poses_improved", "poses_unchanged", "poses_worsened",
    ]
    rows: list[list[Any]] = []
    totals: dict[str, list[float]] = {"trained": [], "novel": []}
    for on_report in filtered:
        off_report = off.get((on_report.policy, on_report.task_name))
        if off_report is None:
            continue
        on_pose = _pose_success_counts(on_report)
        off_pose = _pose_success_counts(off_report)
        improved = sum(1 for p in on_pose if on_pose[p] > off_pose.get(p, 0))
        worsened = sum(1 for p in on_pose if on_pose[p] < off_pose.get(p, 0))
        category = "trained" if on_report.task_name == trained_task else "novel"
        difference = on_report.success_rate - off_report.success_rate
        totals[category].append(difference)
        rows.append(
            [
                on_report.policy, on_report.task_name, category, on_report.success_rate, off_report.success_rate,
                difference, improved, len(on_pose) - improved - worsened, worsened,
            ]
        )
    for category, values in totals.items():
        if values:
            rows.append(["all", f"{category}_mean", category, None, None, float(np.mean(values)), None, None, None])
    return header, rows


def _pose_success_counts(report: EvalReport) -> dict[int, int]:
    counts: dict[int, int] = {}
    for episode in report.episodes:
        counts[episode.pose_index] = counts.get(episode.pose_index, 0) + int(episode.success)
    return counts

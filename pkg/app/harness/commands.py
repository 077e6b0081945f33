"""
Pipeline operations behind the CLI subcommands.

Every ``cli_*`` handler takes the parsed ``argparse.Namespace`` and delegates to a
plain function that tests can call directly.
"""
from __future__ import annotations

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from app.config import load_config
from app.data.dataset import build_training_pairs, compute_norm_stats, dataset_fingerprint, read_dataset, split, write_dataset
from app.data.models import DatasetManifest, OBS_DIM
from app.policy.bundle import ModelBundle, load_bundle, save_bundle
from app.policy.ddpm import ScheduleConfig
from app.policy.ds_filter import FilterConfig, TimeUnit
from app.policy.noise_net import NetConfig, TrainConfig, init_params, measure_inference_frequency, train
from app.policy.runtime import DiffusionPolicy
from app.sim.environment import TRAINING_TASK, EpisodeConfig, make_task
from app.sim.expert import ExpertConfig, collect_demonstrations
from app.utils.exceptions import ConfigurationError, DegenerateSplitError
from app.utils.parallel import map_ordered

from .latency import DEFAULT_LATENCY_TICKS, LatencyMode, LatencyModel, PeriodSource, period_from_hz, table_period
from .report import (
    EvalReport,
    aggregate,
    config_fingerprint,
    efficiency_ranking,
    filter_effect,
    success_table,
    time_table,
    write_episodes_csv,
    write_loss_csv,
    write_rows,
    write_trace_csv,
)
from .rollout import EXPERT_POLICY, RolloutJob, run_episode

logger = logging.getLogger(__name__)


def _resolve(path: Path | None, default_name: str) -> Path:
    if path is not None:
        return Path(path)
    return Path(load_config().paths.OUTPUT_DIR) / default_name


def _write_summary(path: Path, payload: dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str), encoding="utf-8")
    return path


# collect


def collect(
    task: str,
    n_episodes: int,
    seed: int,
    out_dir: Path,
    expert_config: ExpertConfig | None = None,
    episode_config: EpisodeConfig | None = None,
    workers: int = 1,
) -> DatasetManifest:
    """Record ``n_episodes`` successful expert episodes on ``task`` into ``out_dir``."""
    geom = make_task(task)
    expert_config = expert_config or ExpertConfig()
    episode_config = episode_config or EpisodeConfig()
    records = collect_demonstrations(n_episodes, geom, seed, expert_config, episode_config, workers)
    metadata = {
        "seed": seed,
        "task": task,
        "config_fingerprint": config_fingerprint(
            {"expert": expert_config, "episode": episode_config, "geometry": geom, "seed": seed}
        ),
    }
    return write_dataset(records, out_dir, metadata=metadata)


def cli_collect(args: argparse.Namespace) -> None:
    log = logging.getLogger("tacdiff.collect")
    out_dir = _resolve(args.out, f"datasets/{args.task}")
    episode_config = EpisodeConfig(timeout_s=args.timeout, sensor_noise_std=args.sensor_noise)
    expert_config = ExpertConfig(min_success_rate=args.min_success_rate)
    manifest = collect(args.task, args.episodes, args.seed, out_dir, expert_config, episode_config, args.workers)
    log.info(
        "Dataset ready dir=%s episodes=%s rows=%s fingerprint=%s",
        out_dir, len(manifest.episodes), manifest.total_rows, dataset_fingerprint(out_dir),
    )


# train


def train_model(
    dataset_dir: Path,
    out_model: Path,
    net_config: NetConfig,
    train_config: TrainConfig,
    schedule_config: ScheduleConfig | None = None,
    history_ticks: int = DEFAULT_LATENCY_TICKS,
    split_fraction: float = 0.8,
) -> tuple[ModelBundle, Path]:
    """
    Train a noise estimator on an episode-level split of the dataset.

    Normalization statistics come from the training episodes only and travel in the bundle.

    :return: The saved bundle and the path of the loss CSV written next to it.
    """
    schedule_config = schedule_config or ScheduleConfig()
    dataset = read_dataset(dataset_dir)
    train_records, val_records = split(dataset.records, split_fraction, train_config.seed)
    stats = compute_norm_stats(train_records)
    pairs = build_training_pairs(train_records, stats, history_ticks)
    validation = build_training_pairs(val_records, stats, history_ticks)
    schedule = schedule_config.build()

    result = train(pairs, net_config, train_config, schedule, validation=validation)
    fingerprint = config_fingerprint(
        {
            "dataset": dataset_fingerprint(dataset_dir),
            "net": net_config,
            "train": train_config,
            "schedule": schedule_config,
            "history_ticks": history_ticks,
            "split_fraction": split_fraction,
        }
    )
    bundle = ModelBundle(
        params=result.params,
        schedule=schedule,
        norm_stats=stats,
        history_ticks=history_ticks,
        task_name=dataset.manifest.task_name,
        fingerprint=fingerprint,
        history=result.history,
    )
    out_model = Path(out_model)
    save_bundle(bundle, out_model)
    loss_csv = write_loss_csv(result.history.rows(), out_model.with_name(out_model.stem + "_loss.csv"))
    return bundle, loss_csv


def cli_train(args: argparse.Namespace) -> None:
    log = logging.getLogger("tacdiff.train")
    out_model = _resolve(args.out, f"models/df_{args.width}.npz")
    if args.full_scale:
        train_config = TrainConfig.full_scale(seed=args.seed)
    else:
        train_config = TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch_size,
            learning_rate=args.lr,
            seed=args.seed,
            max_steps_per_epoch=args.max_steps_per_epoch or None,
            final_lr_fraction=args.final_lr_fraction,
        )
    net_config = NetConfig(width=args.width, num_residual_blocks=args.blocks, obs_dim=2 * OBS_DIM)
    schedule_config = ScheduleConfig(
        T=args.horizon, beta_start=args.beta_start, beta_end=args.beta_end, final_step_noise=args.final_step_noise
    )
    bundle, loss_csv = train_model(
        args.dataset, out_model, net_config, train_config, schedule_config, args.history_ticks, args.split
    )
    log.info(
        "Model ready path=%s width=%s final_train_loss=%s final_val_loss=%s loss_csv=%s",
        out_model, args.width, bundle.history.final_train, bundle.history.final_validation, loss_csv,
    )


# eval


def evaluate(
    policy: str,
    task: str,
    n_poses: int = 50,
    trials_per_pose: int = 2,
    latency: LatencyModel | None = None,
    filter_config: FilterConfig | None = None,
    seed: int = 0,
    episode_config: EpisodeConfig | None = None,
    workers: int = 1,
    trace_dir: Path | None = None,
) -> EvalReport:
    """
    Closed-loop evaluation of a bundle (path) or of the scripted expert (``"expert"``).

    Runs ``n_poses * trials_per_pose`` trials; in simulated mode the report is a
    deterministic function of the arguments.
    """
    if n_poses < 1 or trials_per_pose < 1:
        raise ConfigurationError(reason="n_poses and trials_per_pose must be >= 1")
    geom = make_task(task)
    latency = latency or LatencyModel()
    filter_config = filter_config or FilterConfig()
    episode_config = episode_config or EpisodeConfig()
    if policy != EXPERT_POLICY:
        # fail early on incompatible bundles
        load_bundle(policy)
    if latency.mode is LatencyMode.LIVE and workers > 1:
        workers = 1

    jobs = [
        RolloutJob(
            policy=str(policy),
            geom=geom,
            episode_config=episode_config,
            latency=latency,
            filter_config=filter_config,
            seed=seed,
            pose_index=pose,
            trial=trial,
            record_trace=trace_dir is not None,
        )
        for pose in range(n_poses)
        for trial in range(trials_per_pose)
    ]
    results = map_ordered(run_episode, jobs, workers)

    if trace_dir is not None:
        for result in results:
            write_trace_csv(result, Path(trace_dir) / f"{task}_pose{result.pose_index:03d}_trial{result.trial}.csv")

    config = {
        "policy": str(policy),
        "task": geom,
        "n_poses": n_poses,
        "trials_per_pose": trials_per_pose,
        "latency": latency,
        "filter": filter_config,
        "episode": episode_config,
        "seed": seed,
    }
    report = aggregate(results, str(policy), task, latency.inference_period_ticks, filter_config.enabled, config)
    logger.info(
        "policy=%s task=%s trials=%s success_rate=%.1f median_time=%.3f efficiency=%.3f",
        Path(policy).name, task, report.trials, report.success_rate, report.time_median, report.efficiency,
    )
    return report


def expert_baseline(
    task: str,
    n_poses: int,
    trials_per_pose: int,
    seed: int,
    episode_config: EpisodeConfig | None = None,
    workers: int = 1,
) -> EvalReport:
    """The expert at 1 kHz without filter or delay."""
    return evaluate(
        EXPERT_POLICY,
        task,
        n_poses,
        trials_per_pose,
        LatencyModel.expert_baseline(),
        FilterConfig(enabled=False),
        seed,
        episode_config,
        workers,
    )


def _latency_from_args(args: argparse.Namespace) -> LatencyModel:
    return LatencyModel(
        inference_period_ticks=args.latency_ticks,
        mode=LatencyMode(args.latency_runtime),
        compute_delay_ticks=args.compute_delay,
    )


def _filter_from_args(args: argparse.Namespace, enabled: bool | None = None) -> FilterConfig:
    return FilterConfig(
        alpha=args.alpha,
        beta=args.beta,
        time_unit=TimeUnit(args.filter_time_unit),
        enabled=(not args.no_filter) if enabled is None else enabled,
    )


def cli_eval(args: argparse.Namespace) -> None:
    log = logging.getLogger("tacdiff.eval")
    out_dir = _resolve(args.out, f"eval/{Path(args.model).stem}_{args.task}")
    episode_config = EpisodeConfig(timeout_s=args.timeout, sensor_noise_std=args.sensor_noise)
    report = evaluate(
        args.model,
        args.task,
        args.poses,
        args.trials,
        _latency_from_args(args),
        _filter_from_args(args),
        args.seed,
        episode_config,
        args.workers,
        args.trace_dir,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    write_episodes_csv(report, out_dir / "episodes.csv")
    log.info("Report written dir=%s fingerprint=%s", out_dir, report.config_fingerprint)


# sweep


def model_period(
    bundle: ModelBundle, source: PeriodSource, fixed_ticks: int, timing_trials: int = 100
) -> tuple[int, float | None]:
    """Inference period for a model bundle and the measured frequency when timing was needed."""
    if source is PeriodSource.FIXED:
        return fixed_ticks, None
    if source is PeriodSource.TABLE:
        return table_period(bundle.params.config.width), None
    timing = measure_inference_frequency(bundle.params, bundle.schedule, trials=timing_trials)
    return period_from_hz(timing.hz), timing.hz


def sweep(
    models: Sequence[Path],
    tasks: Sequence[str],
    out_dir: Path,
    n_poses: int = 50,
    trials_per_pose: int = 2,
    period_source: PeriodSource = PeriodSource.TABLE,
    fixed_ticks: int = DEFAULT_LATENCY_TICKS,
    filter_config: FilterConfig | None = None,
    seed: int = 0,
    include_baseline: bool = True,
    episode_config: EpisodeConfig | None = None,
    workers: int = 1,
) -> list[EvalReport]:
    """
    Evaluate every model on every task and write the comparison tables:
    ``success.csv`` (one row per policy, trained task first, averages),
    ``times.csv`` (execution-time percentiles and efficiency), ``efficiency_ranking.csv``
    and ``models.csv`` (width, final losses, inference period and frequency).
    """
    out_dir = Path(out_dir)
    reports: list[EvalReport] = []
    model_rows: list[list[Any]] = []
    if include_baseline:
        for task in tasks:
            reports.append(expert_baseline(task, n_poses, trials_per_pose, seed, episode_config, workers))

    for path in models:
        bundle = load_bundle(path)
        period, hz = model_period(bundle, period_source, fixed_ticks)
        model_rows.append(
            [
                str(path), bundle.params.config.width, bundle.params.size, bundle.history.final_train,
                bundle.history.final_validation, period, hz,
            ]
        )
        latency = LatencyModel(inference_period_ticks=period)
        for task in tasks:
            reports.append(
                evaluate(str(path), task, n_poses, trials_per_pose, latency, filter_config, seed, episode_config, workers)
            )

    write_rows(out_dir / "success.csv", *success_table(reports, TRAINING_TASK))
    write_rows(out_dir / "times.csv", *time_table(reports))
    write_rows(out_dir / "efficiency_ranking.csv", *efficiency_ranking(reports, EXPERT_POLICY, TRAINING_TASK))
    write_rows(
        out_dir / "models.csv",
        ["model", "width", "parameters", "final_train_loss", "final_val_loss", "inference_period_ticks", "measured_hz"],
        model_rows,
    )
    for report in reports:
        name = "expert" if report.policy == EXPERT_POLICY else Path(report.policy).stem
        (out_dir / "reports").mkdir(parents=True, exist_ok=True)
        (out_dir / "reports" / f"{name}_{report.task_name}.json").write_text(report.to_json(), encoding="utf-8")
    return reports


def cli_sweep(args: argparse.Namespace) -> None:
    log = logging.getLogger("tacdiff.sweep")
    out_dir = _resolve(args.out, "sweep")
    models = list(args.models)
    if args.widths:
        model_dir = Path(args.model_dir) if args.model_dir else _resolve(None, "models")
        models.extend(model_dir / f"df_{width}.npz" for width in args.widths)
    if not models:
        raise ConfigurationError(reason="sweep needs --models or --widths")
    episode_config = EpisodeConfig(timeout_s=args.timeout)
    reports = sweep(
        models,
        args.tasks,
        out_dir,
        args.poses,
        args.trials,
        PeriodSource(args.latency_mode),
        args.latency_ticks,
        _filter_from_args(args),
        args.seed,
        not args.no_baseline,
        episode_config,
        args.workers,
    )
    _write_summary(
        out_dir / "summary.json",
        {"reports": len(reports), "fingerprints": {f"{r.policy}:{r.task_name}": r.config_fingerprint for r in reports}},
    )
    log.info("Sweep done dir=%s cells=%s", out_dir, len(reports))


# ablate-filter


def ablate_filter(
    model: Path,
    tasks: Sequence[str],
    out_dir: Path,
    n_poses: int = 50,
    trials_per_pose: int = 2,
    latency: LatencyModel | None = None,
    filter_config: FilterConfig | None = None,
    seed: int = 0,
    batches: int = 1,
    episode_config: EpisodeConfig | None = None,
    workers: int = 1,
) -> list[tuple[EvalReport, EvalReport]]:
    """
    Paired evaluations with the filter on and off over identical seeds.

    Batch ``b`` uses seed ``seed + b``; ``filter_effect.csv`` summarizes the first batch
    per task and category, ``batches.csv`` lists the paired difference of every batch.
    """
    filter_on = filter_config or FilterConfig()
    filter_off = replace(filter_on, enabled=False)
    pairs: list[tuple[EvalReport, EvalReport]] = []
    batch_rows: list[list[Any]] = []
    for batch in range(batches):
        for task in tasks:
            on = evaluate(str(model), task, n_poses, trials_per_pose, latency, filter_on, seed + batch, episode_config, workers)
            off = evaluate(str(model), task, n_poses, trials_per_pose, latency, filter_off, seed + batch, episode_config, workers)
            pairs.append((on, off))
            batch_rows.append([batch, seed + batch, task, on.success_rate, off.success_rate, on.success_rate - off.success_rate])

    out_dir = Path(out_dir)
    first = pairs[: len(tasks)]
    write_rows(out_dir / "filter_effect.csv", *filter_effect([p[0] for p in first], [p[1] for p in first], TRAINING_TASK))
    write_rows(out_dir / "batches.csv", ["batch", "seed", "task", "success_filter_on", "success_filter_off", "difference"], batch_rows)
    return pairs


def cli_ablate_filter(args: argparse.Namespace) -> None:
    log = logging.getLogger("tacdiff.ablate")
    out_dir = _resolve(args.out, f"ablate/{Path(args.model).stem}")
    pairs = ablate_filter(
        args.model,
        args.tasks,
        out_dir,
        args.poses,
        args.trials,
        _latency_from_args(args),
        _filter_from_args(args, enabled=True),
        args.seed,
        args.batches,
        EpisodeConfig(timeout_s=args.timeout),
        args.workers,
    )
    for on, off in pairs:
        log.info("task=%s filter_on=%.1f filter_off=%.1f", on.task_name, on.success_rate, off.success_rate)


# trace-denoise


def trace_denoise(model: Path, dataset_dir: Path, out_dir: Path, n_samples: int = 10, seed: int = 0, split_fraction: float = 0.8) -> float:
    """
    Export the reverse chain a_T .. a_0 for validation observations, one CSV per sample
    with columns ``tau, a0..a5, gt0..gt5``.

    :return: Fraction of samples whose final action is closer to the ground truth than a_T.
    """
    bundle = load_bundle(model)
    policy = DiffusionPolicy(bundle)
    records = read_dataset(dataset_dir).records
    try:
        _, validation = split(records, split_fraction, seed)
    except DegenerateSplitError:
        validation = records
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    header = ["tau", *[f"a{i}" for i in range(6)], *[f"gt{i}" for i in range(6)]]

    closer = 0
    for k in range(n_samples):
        record = validation[int(rng.integers(len(validation)))]
        tick = int(rng.integers(record.tick_count))
        o_curr = record.observations[tick]
        o_prev = record.observations[max(tick - bundle.history_ticks, 0)]
        truth = record.actions[tick]
        result = policy.sample(o_curr, o_prev, rng, trace=True)
        rows = [[tau, *state.tolist(), *truth.tolist()] for tau, state in zip(result.trace_taus, result.trace)]
        write_rows(out_dir / f"denoise_{k:03d}.csv", header, rows)
        closer += int(np.linalg.norm(result.trace[-1] - truth) < np.linalg.norm(result.trace[0] - truth))
    return closer / n_samples if n_samples else 0.0


def cli_trace_denoise(args: argparse.Namespace) -> None:
    log = logging.getLogger("tacdiff.trace")
    out_dir = _resolve(args.out, f"denoise/{Path(args.model).stem}")
    fraction = trace_denoise(args.model, args.dataset, out_dir, args.samples, args.seed)
    log.info("Denoising traces dir=%s samples=%s closer_at_tau0=%.2f", out_dir, args.samples, fraction)


# bench-inference


def bench_inference(
    widths: Sequence[int],
    models: Sequence[Path] = (),
    horizon: int = 50,
    trials: int = 100,
    seed: int = 0,
) -> tuple[list[str], list[list[Any]]]:
    """
    Sampling frequency per network size, freshly initialized for ``widths`` and loaded for ``models``.
    """
    schedule = ScheduleConfig(T=horizon).build()
    rows: list[list[Any]] = []
    for width in widths:
        params = init_params(NetConfig(width=width), np.random.default_rng(seed))
        timing = measure_inference_frequency(params, schedule, trials=trials, seed=seed)
        rows.append([f"init:{width}", width, params.size, None, horizon, timing.hz, period_from_hz(timing.hz)])
        logger.info("width=%s hz=%.1f period_ticks=%s", width, timing.hz, period_from_hz(timing.hz))
    for path in models:
        bundle = load_bundle(path)
        timing = measure_inference_frequency(bundle.params, bundle.schedule, trials=trials, seed=seed)
        rows.append(
            [
                str(path), bundle.params.config.width, bundle.params.size, bundle.history.final_train,
                bundle.schedule.T, timing.hz, period_from_hz(timing.hz),
            ]
        )
    header = ["model", "width", "parameters", "final_train_loss", "horizon", "hz", "period_ticks"]
    return header, rows


def cli_bench_inference(args: argparse.Namespace) -> None:
    log = logging.getLogger("tacdiff.bench")
    out = _resolve(args.out, "bench_inference.csv")
    header, rows = bench_inference(args.widths, args.models, args.horizon, args.trials, args.seed)
    write_rows(out, header, rows)
    log.info("Inference benchmark written path=%s rows=%s", out, len(rows))


__all__ = [
    "collect",
    "train_model",
    "evaluate",
    "expert_baseline",
    "sweep",
    "ablate_filter",
    "trace_denoise",
    "bench_inference",
    "cli_collect",
    "cli_train",
    "cli_eval",
    "cli_sweep",
    "cli_ablate_filter",
    "cli_trace_denoise",
    "cli_bench_inference",
]

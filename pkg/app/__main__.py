import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .harness import commands
from .harness.latency import DEFAULT_LATENCY_TICKS, LatencyMode, PeriodSource
from .logger import setup_logger
from .policy.ds_filter import TimeUnit
from .sim.environment import TASK_PRESETS, TRAINING_TASK
from .utils.exceptions import TacDiffusionError


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="Root seed")
    parser.add_argument("--workers", type=int, default=1, help="Worker processes for independent episodes")
    parser.add_argument("--timeout", type=float, default=10.0, help="Episode timeout, s")
    parser.add_argument("--out", type=Path, default=None, help="Output path (default under TACDIFF_OUTPUT_DIR)")


def _add_eval_flags(parser: argparse.ArgumentParser, with_filter_switch: bool = True) -> None:
    parser.add_argument("--poses", type=int, default=50, help="Random initial poses")
    parser.add_argument("--trials", type=int, default=2, help="Trials per pose")
    parser.add_argument(
        "--latency-ticks", type=int, default=DEFAULT_LATENCY_TICKS, help="Control ticks between inferences"
    )
    parser.add_argument("--alpha", type=float, default=0.9, help="Filter stiffness gain")
    parser.add_argument("--beta", type=float, default=0.3, help="Filter damping gain")
    parser.add_argument(
        "--filter-time-unit", choices=[u.value for u in TimeUnit], default=TimeUnit.TICK.value,
        help="Time unit of the filter update",
    )
    if with_filter_switch:
        parser.add_argument("--no-filter", action="store_true", help="Apply F_df directly without the filter")


def _add_latency_runtime_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--latency-runtime", choices=[m.value for m in LatencyMode], default=LatencyMode.SIMULATED.value,
        help="Deterministic simulated latency or a real inference thread",
    )
    parser.add_argument(
        "--compute-delay", type=int, default=None, help="Ticks until an inference result is active (default: the period)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m app",
        description="Diffusion policies for tactile peg-in-hole insertion in simulation",
    )
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    subparsers = parser.add_subparsers(dest="command", required=True)

    collect_parser = subparsers.add_parser("collect", help="Record expert demonstrations")
    collect_parser.add_argument("--task", choices=sorted(TASK_PRESETS), default=TRAINING_TASK)
    collect_parser.add_argument("--episodes", type=int, default=200, help="Successful episodes to keep")
    collect_parser.add_argument("--sensor-noise", type=float, default=0.0, help="Std of additive wrench noise, N")
    collect_parser.add_argument(
        "--min-success-rate", type=float, default=0.9, help="Abort when the expert succeeds less often"
    )
    _add_run_flags(collect_parser)
    collect_parser.set_defaults(func=commands.cli_collect)

    train_parser = subparsers.add_parser("train", help="Train a noise estimator on a dataset")
    train_parser.add_argument("dataset", type=Path, help="Dataset directory")
    train_parser.add_argument("--width", type=int, default=256, help="Hidden neurons N")
    train_parser.add_argument("--blocks", type=int, default=2, help="Residual blocks")
    train_parser.add_argument("--epochs", type=int, default=300)
    train_parser.add_argument("--batch-size", type=int, default=256)
    train_parser.add_argument("--lr", type=float, default=1e-3)
    train_parser.add_argument(
        "--max-steps-per-epoch", type=int, default=120, help="Adam steps per epoch, 0 for full passes"
    )
    train_parser.add_argument(
        "--final-lr-fraction", type=float, default=0.1, help="Cosine floor of the learning rate, 1 keeps it constant"
    )
    train_parser.add_argument("--full-scale", action="store_true", help="1500 epochs, batch 4096, full passes")
    train_parser.add_argument("--horizon", type=int, default=50, help="Diffusion steps T")
    train_parser.add_argument("--beta-start", type=float, default=1e-4)
    train_parser.add_argument("--beta-end", type=float, default=1e-2)
    train_parser.add_argument("--final-step-noise", action="store_true", help="Keep noise on the last denoising step")
    train_parser.add_argument(
        "--history-ticks", type=int, default=DEFAULT_LATENCY_TICKS, help="Age of o_prev in control ticks"
    )
    train_parser.add_argument("--split", type=float, default=0.8, help="Share of episodes used for training")
    train_parser.add_argument("--seed", type=int, default=0)
    train_parser.add_argument("--out", type=Path, default=None, help="Bundle path")
    train_parser.set_defaults(func=commands.cli_train)

    eval_parser = subparsers.add_parser("eval", help="Closed-loop evaluation of a model or of the expert")
    eval_parser.add_argument("model", help="Model bundle path, or 'expert'")
    eval_parser.add_argument("--task", choices=sorted(TASK_PRESETS), default=TRAINING_TASK)
    eval_parser.add_argument("--sensor-noise", type=float, default=0.0, help="Std of additive wrench noise, N")
    eval_parser.add_argument("--trace-dir", type=Path, default=None, help="Write a per-tick trace CSV per episode")
    _add_eval_flags(eval_parser)
    _add_latency_runtime_flags(eval_parser)
    _add_run_flags(eval_parser)
    eval_parser.set_defaults(func=commands.cli_eval)

    sweep_parser = subparsers.add_parser("sweep", help="Evaluate models across tasks and write comparison tables")
    sweep_parser.add_argument("--models", nargs="*", type=Path, default=[], help="Model bundle paths")
    sweep_parser.add_argument("--widths", nargs="*", type=int, default=[], help="Use <model-dir>/df_<width>.npz")
    sweep_parser.add_argument("--model-dir", type=Path, default=None)
    sweep_parser.add_argument("--tasks", nargs="+", choices=sorted(TASK_PRESETS), default=list(TASK_PRESETS))
    sweep_parser.add_argument(
        "--latency-mode", choices=[s.value for s in PeriodSource], default=PeriodSource.TABLE.value,
        help="Inference period per model: fixed, measured on this machine, or the reference frequency table",
    )
    sweep_parser.add_argument("--no-baseline", action="store_true", help="Skip the expert baseline rows")
    _add_eval_flags(sweep_parser)
    _add_run_flags(sweep_parser)
    sweep_parser.set_defaults(func=commands.cli_sweep)

    ablate_parser = subparsers.add_parser("ablate-filter", help="Paired evaluation with the filter on and off")
    ablate_parser.add_argument("model", type=Path, help="Model bundle path")
    ablate_parser.add_argument("--tasks", nargs="+", choices=sorted(TASK_PRESETS), default=list(TASK_PRESETS))
    ablate_parser.add_argument("--batches", type=int, default=3, help="Independent seed batches")
    _add_eval_flags(ablate_parser, with_filter_switch=False)
    _add_latency_runtime_flags(ablate_parser)
    _add_run_flags(ablate_parser)
    ablate_parser.set_defaults(func=commands.cli_ablate_filter)

    trace_parser = subparsers.add_parser("trace-denoise", help="Export reverse-chain traces for validation samples")
    trace_parser.add_argument("model", type=Path, help="Model bundle path")
    trace_parser.add_argument("dataset", type=Path, help="Dataset directory")
    trace_parser.add_argument("--samples", type=int, default=10)
    trace_parser.add_argument("--seed", type=int, default=0)
    trace_parser.add_argument("--out", type=Path, default=None, help="Output directory")
    trace_parser.set_defaults(func=commands.cli_trace_denoise)

    bench_parser = subparsers.add_parser("bench-inference", help="Measure sampling frequency per network size")
    bench_parser.add_argument("--widths", nargs="*", type=int, default=[128, 256, 512, 1024])
    bench_parser.add_argument("--models", nargs="*", type=Path, default=[])
    bench_parser.add_argument("--horizon", type=int, default=50, help="Diffusion steps T for fresh networks")
    bench_parser.add_argument("--trials", type=int, default=100, help="Timed sampling calls, at least 100")
    bench_parser.add_argument("--seed", type=int, default=0)
    bench_parser.add_argument("--out", type=Path, default=None, help="CSV path")
    bench_parser.set_defaults(func=commands.cli_bench_inference)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    config = load_config()
    setup_logger(config.paths.LOG_DIR, verbose=args.verbose)
    logger = logging.getLogger(f"tacdiff.{args.command}")
    logger.info("🚀 Starting %s", args.command)
    logger.info("📁 Output dir: %s", config.paths.OUTPUT_DIR)
    try:
        args.func(args)
    except TacDiffusionError as exc:
        logger.error("%s", exc)
        return 2
    except Exception:
        logger.exception("Unexpected failure in %s", args.command)
        return 1
    logger.info("✅ %s finished", args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())

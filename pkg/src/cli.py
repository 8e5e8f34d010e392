"""
Command-line entry point: `python -m src.cli <command> [flags]`.

Commands: register, odometry, train, gradcheck, sweep. Configuration is
layered as built-in defaults, then `--config FILE` (`key=value` lines),
then explicit flags. Results go to stdout and files; logs go to stderr.

Exit codes: 0 success, 1 I/O / parse / configuration error, 2 numerical
failure, 3 self-check failure.
"""

import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional, Sequence

from pydantic import BaseModel, ValidationError

from .pipelines.gradcheck_pipeline import run_gradcheck
from .pipelines.odometry_pipeline import run_odometry
from .pipelines.register_pipeline import run_register
from .pipelines.sweep_pipeline import run_sweep
from .pipelines.train_pipeline import load_training_pairs, run_training
from .tools.kitti_io_tools import format_pose_line, write_trajectory
from .tools.knn_tools import configure_workers
from .tools.report_tools import format_value
from .utils.consts import (
    DEFAULT_KD,
    DEFAULT_MAX_TRAIN_POINTS,
    DEFAULT_PARAM_SAMPLES,
    DEFAULT_UNROLL_ITERATIONS,
    DEFAULT_VOXEL_SIZE,
    GRADCHECK_TOLERANCE,
    ExitCode,
)
from .utils.errors import CheckFailed, InvalidConfig, WgicpError, exception_to_error, exit_code_for
from .utils.logging_utils import configure_logging
from .utils.parsing import parse_config_file, parse_float_csv
from .utils.paths import ensure_parent_dir
from .utils.schemas import (
    Backend,
    GateMode,
    GradcheckConfig,
    InitialGuess,
    LmParams,
    OdometryConfig,
    RegisterConfig,
    SweepConfig,
    SweepRow,
    TrainConfig,
)

logger = logging.getLogger(__name__)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors are InvalidConfig (exit 1) instead of SystemExit(2)."""

    def error(self, message: str):
        raise InvalidConfig(f"{self.prog}: {message}", hint=f"Run '{self.prog} --help' for usage")


def _build_config(model: Callable[..., BaseModel], **values) -> BaseModel:
    try:
        return model(**values)
    except ValidationError as e:
        raise InvalidConfig(f"invalid {model.__name__}: {e}") from e


def _csv(text: str, flag: str) -> List[float]:
    values = parse_float_csv(text)
    if values is None:
        raise InvalidConfig(f"{flag}: expected at least one number")
    return values


# =============================================================================
# PARSER
# =============================================================================


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("--threads", type=int, default=None, help="KD-tree query threads (default: all cores)")
    common.add_argument("--config", default=None, help="key=value file; explicit flags override it")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = _Parser(prog="wgicp", description="Weighted GICP lidar odometry toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    backends = [b.value for b in Backend]

    p = sub.add_parser("register", parents=[common], help="register one cloud pair")
    p.add_argument("--source", required=True, help=".bin or whitespace xyz text")
    p.add_argument("--target", required=True, help=".bin or whitespace xyz text")
    p.add_argument("--backend", choices=backends, default=Backend.GICP.value)
    p.add_argument("--voxel", type=float, default=None, help="voxel size in meters (default: no downsampling)")
    p.add_argument("--kd", type=int, default=DEFAULT_KD, help="soft correspondences per point (wgicp)")
    p.add_argument("--out", default=None, help="write the pose as a one-line KITTI trajectory")

    p = sub.add_parser("odometry", parents=[common], help="odometry over a KITTI-style sequence")
    p.add_argument("--data", required=True, help="sequence directory with velodyne/")
    p.add_argument("--backend", choices=backends, default=Backend.GICP.value)
    p.add_argument("--rejection", type=float, default=0.0, help="hard rejection ratio in [0, 1)")
    p.add_argument("--model", default=None, help="weight model checkpoint")
    p.add_argument("--gt", default=None, help="ground-truth poses (default: <data>/poses.txt)")
    p.add_argument("--out-traj", default=None)
    p.add_argument("--out-report", default=None)
    p.add_argument("--voxel", type=float, default=DEFAULT_VOXEL_SIZE)
    p.add_argument("--kd", type=int, default=DEFAULT_KD)
    p.add_argument("--initial-guess", choices=[g.value for g in InitialGuess], default=InitialGuess.IDENTITY.value)
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--plot-dir", default=None)

    p = sub.add_parser("train", parents=[common], help="train the weight model")
    p.add_argument("--data", required=True, help="sequence directory with velodyne/ and poses.txt")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out-model", required=True)
    p.add_argument("--loss-history", default=None, help="default: <out-model>.loss.tsv")
    p.add_argument("--max-points", type=int, default=DEFAULT_MAX_TRAIN_POINTS, help="0 keeps every point")
    p.add_argument("--max-pairs", type=int, default=None)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--kd", type=int, default=DEFAULT_KD)
    p.add_argument("--iters", type=int, default=DEFAULT_UNROLL_ITERATIONS, help="unrolled solver iterations")
    p.add_argument("--voxel", type=float, default=DEFAULT_VOXEL_SIZE)
    p.add_argument("--rejection", type=float, default=0.0, help="report hard-rejection loss at this ratio")

    p = sub.add_parser("gradcheck", parents=[common], help="tape gradients vs finite differences")
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--kd", type=int, default=DEFAULT_KD)
    p.add_argument("--param-samples", type=int, default=DEFAULT_PARAM_SAMPLES, help="check M seeded parameters instead of all (0 = all)")
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.add_argument("--corrupt-adjoint", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("sweep", parents=[common], help="rejection-ratio sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--backend", choices=backends, default=Backend.WGICP.value)
    p.add_argument("--rejections", default="0,0.25,0.5,0.75")
    p.add_argument("--voxels", default=str(DEFAULT_VOXEL_SIZE))
    p.add_argument("--kd", type=int, default=DEFAULT_KD)
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--plot-dir", default=None)

    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise InvalidConfig(f"unknown command {command!r}")


def _parse_bool(raw: str, key: str) -> bool:
    value = raw.strip().lower()
    if value in _TRUE:
        return True
    if value in _FALSE:
        return False
    raise InvalidConfig(f"config key {key!r}: expected a boolean, got {raw!r}")


def apply_config_file(subparser: argparse.ArgumentParser, path: str) -> Dict[str, object]:
    """Install file values as parser defaults; string values go through the flag's own type."""
    values = parse_config_file(path)
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise InvalidConfig(f"{path}: unknown config keys {unknown}", hint="Keys are flag names, e.g. out-traj=...")
    defaults: Dict[str, object] = {}
    for key, raw in values.items():
        action = actions[key]
        defaults[key] = _parse_bool(raw, key) if action.nargs == 0 else raw
    subparser.set_defaults(**defaults)
    return defaults


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.config:
        apply_config_file(_subparser(parser, args.command), args.config)
        args = parser.parse_args(argv)
    return args


# =============================================================================
# COMMANDS
# =============================================================================


def _print_config(command: str, config: BaseModel, **extra: object) -> None:
    """Resolved configuration on stderr for every run, whatever the log level."""
    fields = " ".join(f"{k}={v}" for k, v in extra.items())
    prefix = f"config command={command} {fields}".rstrip()
    print(f"{prefix} {config.model_dump_json()}", file=sys.stderr)


def cmd_register(args: argparse.Namespace) -> int:
    config = _build_config(
        RegisterConfig, backend=args.backend, voxel_size=args.voxel, k_d=args.kd
    )
    _print_config("register", config)
    result, note = run_register(args.source, args.target, config)
    if note:
        print(f"warning: {note}", file=sys.stderr)
    print(format_pose_line(result.transform))
    print(f"objective\t{result.final_objective:.17g}")
    print(f"iterations\t{result.iterations}")
    if args.out:
        ensure_parent_dir(args.out)
        write_trajectory([result.transform], args.out)
    return ExitCode.OK


def _odometry_config(args: argparse.Namespace, rejection: float, backend: str) -> OdometryConfig:
    return _build_config(
        OdometryConfig,
        voxel_size=args.voxel if hasattr(args, "voxel") else DEFAULT_VOXEL_SIZE,
        backend=backend,
        rejection_ratio=rejection,
        model_path=args.model,
        initial_guess=getattr(args, "initial_guess", InitialGuess.IDENTITY.value),
        k_d=args.kd,
        max_frames=args.max_frames,
    )


def cmd_odometry(args: argparse.Namespace) -> int:
    config = _odometry_config(args, args.rejection, args.backend)
    _print_config("odometry", config, data=args.data)
    outcome = run_odometry(args.data, config, args.gt, args.out_traj, args.out_report, args.plot_dir)
    for key, value in outcome.metrics.items():
        print(f"{key}\t{format_value(value)}")
    return ExitCode.OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _build_config(
        TrainConfig,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch=args.batch,
        seed=args.seed,
        rejection_ratio=args.rejection,
        max_points=args.max_points or None,
        k_d=args.kd,
        lm=_build_config(LmParams, gate=GateMode.SMOOTH_GATED, unroll_iterations=args.iters),
    )
    if not args.voxel > 0.0:
        raise InvalidConfig(f"--voxel must be positive, got {args.voxel}")
    _print_config("train", config, data=args.data, voxel=args.voxel)
    pairs = load_training_pairs(args.data, args.voxel, max_pairs=args.max_pairs)
    summary = run_training(pairs, config, args.out_model, args.loss_history)
    print(f"epochs\t{summary.epochs}")
    if summary.initial_loss is not None:
        print(f"initial_loss\t{format_value(summary.initial_loss)}")
    if summary.final_loss is not None:
        print(f"final_loss\t{format_value(summary.final_loss)}")
    return ExitCode.OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = _build_config(
        GradcheckConfig,
        points=args.points,
        iterations=args.iters,
        seed=args.seed,
        k_d=args.kd,
        param_samples=args.param_samples,
        tolerance=args.tolerance,
        corrupt_adjoint=args.corrupt_adjoint,
    )
    _print_config("gradcheck", config)
    report = run_gradcheck(config)
    print(f"max_rel_error\t{report.max_rel_error:.6e}")
    print(f"median_rel_error\t{report.median_rel_error:.6e}")
    print(f"checked\t{report.n_weights + report.n_params_checked}")
    if not report.passed:
        raise CheckFailed(
            f"max relative gradient error {report.max_rel_error:.3e} >= tolerance {config.tolerance:.1e}",
            context={"max_rel_error": report.max_rel_error},
        )
    return ExitCode.OK


def cmd_sweep(args: argparse.Namespace) -> int:
    rejections = _csv(args.rejections, "--rejections")
    voxels = _csv(args.voxels, "--voxels")
    base = _odometry_config(argparse.Namespace(**{**vars(args), "voxel": voxels[0]}), 0.0, args.backend)
    config = _build_config(SweepConfig, rejections=rejections, voxel_sizes=voxels, odometry=base)
    _print_config("sweep", config, data=args.data)
    rows = run_sweep(args.data, config, args.gt, args.out, args.plot_dir)
    print("\t".join(SweepRow.model_fields))
    for row in rows:
        print("\t".join(format_value(v) for v in row.model_dump().values()))
    return ExitCode.OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "register": cmd_register,
    "odometry": cmd_odometry,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
        configure_logging(args.log_level)
        configure_workers(args.threads)
        return int(COMMANDS[args.command](args))
    except WgicpError as e:
        error = exception_to_error(e.error_type, e)["error"]
        print(f"error: {error['message']}", file=sys.stderr)
        if error["hint"]:
            print(f"hint: {error['hint']}", file=sys.stderr)
        return exit_code_for(e)
    except Exception:
        logger.exception("unexpected failure")
        return int(ExitCode.IO_ERROR)


if __name__ == "__main__":
    sys.exit(main())

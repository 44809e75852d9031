"""Entry point for the agriradar command-line interface."""

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import AgriRadarError, ConfigError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _common_parser() -> argparse.ArgumentParser:
    """Flags shared by every subcommand."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", type=str, default=None,
                        help="YAML config file (defaults when omitted)")
    common.add_argument("--seed", type=int, default=None,
                        help="Random seed (overrides the config file)")
    common.add_argument("--threads", "-j", type=int, default=None,
                        help="Worker threads (overrides the config file)")
    common.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging level")
    common.add_argument("--quiet", "-q", action="store_true",
                        help="Hide progress bars and info messages")
    return common


def parse_args(argv=None) -> argparse.Namespace:
    """Parse command-line arguments."""
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="agriradar",
        description="Radar semantic perception for low-altitude agricultural flight",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", "-v", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("simulate", parents=[common], formatter_class=fmt,
                       help="Synthesize radar cubes, poses and ground truth")
    p.add_argument("--out", "-o", required=True, help="Output directory")
    p.add_argument("--scenes", type=int, default=1, help="Number of independent sequences")

    p = sub.add_parser("preprocess", parents=[common], formatter_class=fmt,
                       help="Accumulate frames, run CFAR and build supervision")
    p.add_argument("--in", dest="in_dir", required=True, help="Simulated sequence directory")
    p.add_argument("--out", "-o", required=True, help="Output sample directory")

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="Train a model")
    p.add_argument("stage", choices=["1", "2", "distill"], help="What to train")
    p.add_argument("--data", required=True, help="Preprocessed sample directory")
    p.add_argument("--out", "-o", required=True, help="Model file to write")
    p.add_argument("--teacher", default=None, help="Stage-II model to distill from")
    p.add_argument("--log", default=None, help="Training log file (JSON lines)")

    p = sub.add_parser("infer", parents=[common], formatter_class=fmt,
                       help="Predict a semantic point cloud")
    p.add_argument("--data", required=True, help="Sample or raw sequence directory")
    p.add_argument("--out", "-o", required=True, help="Predicted cloud file (directory for several)")
    p.add_argument("--mode", choices=["heun", "consistency"], default=None,
                   help="Sampler (overrides pipeline.sampler)")
    p.add_argument("--stage1", default=None, help="Stage-I model file")
    p.add_argument("--stage2", default=None, help="Stage-II model file (heun)")
    p.add_argument("--consistency", default=None, help="Consistency model file")
    p.add_argument("--cheat-oracle", action="store_true",
                   help="Use ground truth in place of both stages (plumbing check)")

    p = sub.add_parser("evaluate", parents=[common], formatter_class=fmt,
                       help="Score a predicted cloud against ground truth")
    p.add_argument("pred", help="Predicted point-cloud file")
    p.add_argument("gt", help="Ground-truth point-cloud file")
    p.add_argument("--tau", type=float, action="append", default=None,
                   help="Matching threshold in meters (repeatable; overrides evaluate.taus)")
    p.add_argument("--out", "-o", default=None, help="Write metric records as JSON lines")

    p = sub.add_parser("bench", parents=[common], formatter_class=fmt, help="Time a component")
    p.add_argument("component", choices=["accumulate", "metrics"])
    p.add_argument("--sizes", type=int, nargs="+", default=None,
                   help="Frame counts (accumulate) or point counts (metrics)")
    p.add_argument("--thread-counts", type=int, nargs="+", default=[1, 8],
                   help="Thread counts to compare")
    p.add_argument("--repetitions", type=int, default=5, help="Repetitions per measurement")

    return parser.parse_args(argv)


def _run(args: argparse.Namespace) -> None:
    # Heavy imports here to keep --help fast
    from .commands import (
        cmd_bench,
        cmd_evaluate,
        cmd_infer,
        cmd_preprocess,
        cmd_simulate,
        cmd_train,
        format_bench,
        format_table,
    )
    from .config import load_config

    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.threads is not None:
        config.threads = args.threads
    config.validate()
    seed, threads = config.seed, config.threads
    progress = not args.quiet and sys.stderr.isatty()

    if args.command == "simulate":
        cmd_simulate(config, seed, Path(args.out), threads, args.scenes)
    elif args.command == "preprocess":
        cmd_preprocess(Path(args.in_dir), config, threads, Path(args.out))
    elif args.command == "train":
        cmd_train(args.stage, Path(args.data), config, seed, Path(args.out),
                  teacher=Path(args.teacher) if args.teacher else None,
                  log_path=Path(args.log) if args.log else None, progress=progress)
    elif args.command == "infer":
        manifest = cmd_infer(
            Path(args.data), config, seed, Path(args.out), mode=args.mode,
            stage1=Path(args.stage1) if args.stage1 else None,
            stage2=Path(args.stage2) if args.stage2 else None,
            consistency=Path(args.consistency) if args.consistency else None,
            cheat_oracle=args.cheat_oracle, threads=threads,
        )
        timings = ", ".join(f"{k} {v:.1f} ms" for k, v in manifest.timings_ms.items())
        print(f"{manifest.counters['output_points']} points; {timings}")
    elif args.command == "evaluate":
        taus = tuple(args.tau) if args.tau else tuple(config.evaluate.taus)
        records = cmd_evaluate(Path(args.pred), Path(args.gt), taus,
                               Path(args.out) if args.out else None)
        print(format_table(records))
    elif args.command == "bench":
        rows = cmd_bench(args.component, config, args.sizes, args.thread_counts,
                         args.repetitions, seed)
        print(format_bench(rows))


def main(argv=None) -> None:
    """Main entry point."""
    args = parse_args(argv)
    level = logging.WARNING if args.quiet else getattr(logging, args.log_level)
    logging.basicConfig(level=level, format=LOG_FORMAT)

    from .diffusion import DivergenceError

    try:
        _run(args)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)
    except DivergenceError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_DIVERGENCE)
    except (AgriRadarError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_DATA)
    except KeyboardInterrupt:
        sys.exit(130)


if __name__ == "__main__":
    main()

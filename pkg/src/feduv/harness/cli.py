"""Command line entry point: ``feduv run | partition-inspect | gradcheck | plot``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .. import gradcheck as gc
from .config import ConfigError, load_config
from .plots import PLOT_KINDS, plot_command
from .runner import RunError, partition_inspect, run_command

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("feduv")


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)

    def progress(rep):
        log.info("round %d  acc=%.4f  sv_mean=%.4f  %.2fs", rep.round, rep.test_accuracy,
                 rep.singular_values.mean(), rep.wall_seconds)

    path = run_command(cfg, args.out, workers=args.workers, progress=progress)
    print(path)
    return EXIT_OK


def cmd_partition_inspect(args) -> int:
    cfg = _load(args)
    text, _ = partition_inspect(cfg, args.out)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gc.run_suite(seed=args.seed or 0, trials=args.trials, corrupt=args.corrupt)
    ok = True
    for name, err in results.items():
        passed = err < gc.REL_TOL
        ok &= passed
        print(f"{name:16s} max_rel_err={err:.3e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_plot(args) -> int:
    print(plot_command(args.metrics, args.kind, args.out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feduv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a configured experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("partition-inspect", help="print per-client class histograms")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_partition_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--corrupt", choices=gc.FAMILIES, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="render metrics CSVs to SVG")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--kind", choices=PLOT_KINDS, required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) is not None and getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RunError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

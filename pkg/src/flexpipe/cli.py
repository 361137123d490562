"""Command-line entry points: validate, run, serve, bench, scenarios.

Exit codes are a stable contract for scripts:

    0   success
    1   the recipe failed to parse or validate
    2   deployment or runtime failure (including I/O on reports)
    64  usage error
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path

from . import __version__
from .deployer import Daemon, deploy
from .errors import ConfigError, DeploymentError, FlexpipeError, RecipeError
from .kernels import default_registry
from .metrics import bench, compare, emit_csv, emit_json, read_report, render_comparison
from .recipe import bundled_recipe_path, load_recipe, validate

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2
EXIT_USAGE = 64

log = logging.getLogger("flexpipe.cli")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _server(text: str) -> tuple[str, str]:
    name, sep, addr = text.partition("=")
    if not sep or not name or not addr:
        raise argparse.ArgumentTypeError(f"expected name=host:port, got {text!r}")
    return name, addr


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flexpipe", description="Distributed stream-processing pipelines.")
    parser.add_argument("--version", action="version", version=f"flexpipe {__version__}")
    parser.add_argument("--log-level", default="WARNING",
                        help="logging level (FLEXPIPE_LOG overrides)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def recipe_arg(p):
        p.add_argument("--recipe", required=True,
                       help="recipe file, or the name of a bundled recipe")

    def server_arg(p):
        p.add_argument("--server", action="append", type=_server, default=[],
                       metavar="NAME=HOST:PORT", help="daemon address for a placement label")

    p = sub.add_parser("validate", help="check a recipe and print its violations")
    recipe_arg(p)

    p = sub.add_parser("run", help="deploy a pipeline and run it")
    recipe_arg(p)
    server_arg(p)
    p.add_argument("--duration-s", type=float, default=None,
                   help="stop after this many seconds (default: until interrupted)")

    p = sub.add_parser("serve", help="host pipeline parts for remote clients")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--host", default="0.0.0.0")

    p = sub.add_parser("bench", help="measure latency and throughput of a pipeline")
    recipe_arg(p)
    server_arg(p)
    p.add_argument("--duration-s", type=float, default=10.0)
    p.add_argument("--warmup-s", type=float, default=2.0)
    p.add_argument("--out", default=None, help="report path")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--scenario", default=None, help="scenario label (default: recipe name)")
    p.add_argument("--workload", default="", help="workload label used when comparing")

    p = sub.add_parser("scenarios", help="compare benchmark reports")
    p.add_argument("reports", nargs="*", help="CSV or JSON reports")
    return parser


def _configure_logging(level: str) -> None:
    level = os.environ.get("FLEXPIPE_LOG") or level
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise UsageError(f"unknown log level {level!r}")
    logging.basicConfig(level=numeric, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _resolve_recipe(name: str) -> Path:
    path = Path(name)
    if path.exists() or path.suffix or os.sep in name:
        return path
    bundled = Path(str(bundled_recipe_path(name)))
    return bundled if bundled.exists() else path


def _print_violations(exc: RecipeError) -> None:
    for v in exc.violations:
        print(f"error: {v}", file=sys.stderr)


def _wait_for_signal(stop: threading.Event) -> None:
    def handler(signum, frame):
        stop.set()

    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, handler)


def cmd_validate(args) -> int:
    recipe = load_recipe(_resolve_recipe(args.recipe))
    meta = validate(recipe, default_registry())
    print(f"ok: {len(meta.kernels)} kernels, {len(meta.local_edges)} local and "
          f"{len(meta.remote_edges)} remote connections")
    return EXIT_OK


def cmd_run(args) -> int:
    recipe = load_recipe(_resolve_recipe(args.recipe))
    stop = threading.Event()
    _wait_for_signal(stop)
    handle = deploy(recipe, default_registry(), dict(args.server))
    started = time.monotonic()
    try:
        handle.start()
        while not stop.is_set():
            if handle.wait(0.2):
                break
            if args.duration_s is not None and time.monotonic() - started >= args.duration_s:
                break
    finally:
        handle.stop()
    for sink in handle.sinks():
        print(f"{sink.id}: {sink.received} messages")
    print(f"{handle.instance_count} kernels, state {handle.state.value}, "
          f"{time.monotonic() - started:.1f} s")
    failures = handle.failures
    for kid, cause in failures.items():
        print(f"error: {kid}: {cause}", file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_serve(args) -> int:
    stop = threading.Event()
    _wait_for_signal(stop)
    try:
        daemon = Daemon(args.port, default_registry(), args.host).start()
    except OSError as exc:
        print(f"error: cannot listen on port {args.port}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"listening on {daemon.port}", flush=True)
    try:
        stop.wait()
    finally:
        daemon.close()
    print("stopped", flush=True)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.duration_s <= 0:
        raise UsageError("--duration-s must be positive")
    if args.warmup_s < 0 or args.duration_s < args.warmup_s:
        raise UsageError("--warmup-s must be between 0 and --duration-s")
    path = _resolve_recipe(args.recipe)
    recipe = load_recipe(path)
    report = bench(recipe, args.duration_s, args.warmup_s, servers=dict(args.server),
                   scenario=args.scenario or path.stem, workload=args.workload)
    if args.out:
        try:
            (emit_json if args.format == "json" else emit_csv)(report, args.out)
        except OSError as exc:
            print(f"error: cannot write report {args.out}: {exc.strerror or exc}", file=sys.stderr)
            return EXIT_RUNTIME
    if report.end_to_end is None:
        print(f"{report.scenario}: no messages reached a sink (degenerate run)")
    else:
        print(f"{report.scenario}: end-to-end mean {report.end_to_end.mean_ms:.2f} ms, "
              f"throughput {report.throughput:.2f} msg/s")
    return EXIT_OK


def cmd_scenarios(args) -> int:
    if not args.reports:
        raise UsageError("scenarios needs at least one report")
    reports = [read_report(p) for p in args.reports]
    print(render_comparison(compare(reports)))
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "run": cmd_run,
    "serve": cmd_serve,
    "bench": cmd_bench,
    "scenarios": cmd_scenarios,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        _configure_logging(args.log_level)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"flexpipe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RecipeError as exc:
        _print_violations(exc)
        return EXIT_INVALID
    except (DeploymentError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        print(f"error: {exc.filename or exc}: no such file", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError, FlexpipeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

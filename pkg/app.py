"""
Command-line entry point for the nonlocal traffic solver.

    python app.py simulate config.toml --out results/
    python app.py simulate --preset paper-fig1 --path both
    python app.py eoc config.toml --levels 3
    python app.py runs results/ --failed

Exit status is 0 only when every enabled diagnostic passed.
"""
import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from services.diagnostics_service import DiagnosticsError
from services.scenario_service import (
    PRESETS, SWEEP_KEYS, ConfigError, parse_config, read_registry, run_eoc, run_scenario,
    write_outputs,
)
from services.solver_service import SolverError

logger = logging.getLogger("traffic")

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_RUN_FAILED = 3


def create_parser() -> argparse.ArgumentParser:
    """
    Build the argument parser.

    Returns:
        argparse.ArgumentParser: parser with the simulate, eoc and runs commands
    """
    parser = argparse.ArgumentParser(prog="traffic", description="Nonlocal traffic flow finite-volume solver.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="run a scenario and write its outputs")
    _add_source_arguments(sim)
    sim.add_argument("--sweep", help="parameter sweep, e.g. eps=-0.5,0,0.5")
    sim.add_argument("--out", default="results", help="output directory (default: results)")
    sim.add_argument("--path", choices=["naive", "fast", "both"], help="nonlocal sum evaluation")
    sim.add_argument("--diag", choices=["all", "off"], help="per-step diagnostics")
    sim.add_argument("--workers", type=int, help="concurrent sweep members")

    order = commands.add_parser("eoc", help="experimental order of convergence at dx, dx/2, dx/4")
    _add_source_arguments(order)
    order.add_argument("--levels", type=int, default=3, help="number of refinement levels (default: 3)")

    runs = commands.add_parser("runs", help="list the runs registered in an output directory")
    runs.add_argument("out_dir", help="directory written by simulate --out")
    runs.add_argument("--failed", action="store_true", help="only list runs with failing checks")
    return parser


def _add_source_arguments(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("config", nargs="?", help="TOML scenario file")
    sub.add_argument("--preset", choices=sorted(PRESETS), help="start from a built-in scenario")


def parse_sweep(text: str) -> Dict[str, Any]:
    """'eps=-0.5,0,0.5' -> sweep table."""
    key, sep, values = text.partition("=")
    key = key.strip()
    if not sep or key not in SWEEP_KEYS:
        raise ConfigError(f"--sweep expects key=v1,v2,... with key in {', '.join(SWEEP_KEYS)}.")
    try:
        parsed = [float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--sweep values must be numbers, got '{values}'.")
    if not parsed:
        raise ConfigError("--sweep needs at least one value.")
    return {"key": key, "values": parsed}


def overrides_from(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if args.preset:
        overrides["preset"] = args.preset
    if getattr(args, "sweep", None):
        overrides["sweep"] = parse_sweep(args.sweep)
    if getattr(args, "path", None):
        overrides["path"] = args.path
    if getattr(args, "diag", None):
        overrides["diagnostics"] = args.diag == "all"
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    return overrides


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def simulate(args: argparse.Namespace) -> int:
    scenario = parse_config(args.config, overrides_from(args))
    reports = run_scenario(scenario)
    written = write_outputs(reports, args.out, scenario)
    logger.info("wrote %d files to %s", len(written), args.out)

    for report in reports:
        failed = [c.name for c in report.checks if c.applicable and not c.ok]
        status = "ok" if not failed else "FAILED " + ", ".join(failed)
        print(f"{report.tag}: {report.steps} steps, lambda={report.lam:.6g}, "
              f"t={report.final_time:.6g}, warnings={len(report.warnings)}, {status}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECKS_FAILED


def order(args: argparse.Namespace) -> int:
    scenario = parse_config(args.config, overrides_from(args))
    orders = run_eoc(scenario, args.levels)
    for level, value in enumerate(orders):
        print(f"levels {level}-{level + 2}: order {value:.4f}")
    return EXIT_OK


def list_runs(args: argparse.Namespace) -> int:
    runs, failures = read_registry(args.out_dir)
    failed_tags = {f["tag"] for f in failures}
    for run in runs:
        if args.failed and run["tag"] not in failed_tags:
            continue
        status = "ok" if run["tag"] not in failed_tags else "FAILED"
        print(f"{run['tag']}: {run['steps']} steps, lambda={run['lambda']:.6g}, "
              f"t={run['final_time']:.6g}, warnings={run['warnings']}, {status}")
    for failure in failures:
        print(f"  {failure['tag']} {failure['name']}: {failure['message']}")
    return EXIT_OK if not failures else EXIT_CHECKS_FAILED


HANDLERS = {"simulate": simulate, "eoc": order, "runs": list_runs}


def main(argv: Optional[List[str]] = None) -> int:
    args = create_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    if args.command != "runs" and args.config is None and args.preset is None:
        logger.error("Give a config file or --preset.")
        return EXIT_BAD_CONFIG
    try:
        return HANDLERS[args.command](args)
    except ConfigError as exc:
        logger.error("Invalid configuration: %s", exc)
        return EXIT_BAD_CONFIG
    except (SolverError, DiagnosticsError, OSError) as exc:
        logger.error("Run failed: %s", exc)
        return EXIT_RUN_FAILED


if __name__ == '__main__':
    sys.exit(main())

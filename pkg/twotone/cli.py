"""Command-line interface for twotone."""
import argparse
import logging
import re
import sys
from typing import Any, Dict, List, Optional, Sequence

from twotone.config import (
    MAP_QUANTITIES,
    ReproduceTarget,
    RunConfig,
    Task,
    load_config_file,
    merge,
)
from twotone.core import Runner
from twotone.errors import ConfigError, NumericalError, UnstableSpectrumError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_PARTIAL = 3
EXIT_UNSTABLE_SPECTRUM = 4
EXIT_INTERRUPTED = 130

# Flags whose value may start with "-" (negative numbers and ranges).
VALUE_FLAGS = {
    "--dm-range",
    "--dc-range",
    "--delta-c",
    "--delta-m",
    "--dc-norm",
    "--dm-norm",
    "--omega-min",
    "--omega-max",
}

NEGATIVE_VALUE = re.compile(r"^-[\d.]")

# Pairs that describe the same quantity; a flag for one drops the other from the file.
EXCLUSIVE_KEYS = {
    "system": [("g", "cooperativity")],
    "drive": [("delta_c", "delta_c_norm"), ("delta_m", "delta_m_norm")],
}


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    """Setup logging configuration.

    Args:
        verbose: Enable verbose logging
        quiet: Suppress all but error messages
    """
    if quiet:
        level = logging.ERROR
    elif verbose:
        level = logging.DEBUG
    else:
        level = logging.INFO

    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    handler = logging.StreamHandler()
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root_logger.addHandler(handler)


def _normalize_argv(argv: Sequence[str]) -> List[str]:
    """Attach values such as "-18:18" to their flag so argparse accepts them."""
    out: List[str] = []
    tokens = list(argv)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if token in VALUE_FLAGS and i + 1 < len(tokens) and NEGATIVE_VALUE.match(tokens[i + 1]):
            out.append(f"{token}={tokens[i + 1]}")
            i += 2
            continue
        out.append(token)
        i += 1
    return out


def _opt(args: argparse.Namespace, name: str) -> Any:
    return getattr(args, name, None)


def _flag(args: argparse.Namespace, name: str) -> Optional[bool]:
    """True when a store_true flag is set; None so that it never overrides the file."""
    return True if getattr(args, name, False) else None


def build_overrides(task: Task, args: argparse.Namespace) -> Dict[str, Any]:
    """Translate parsed flags into a config mapping (None = not given)."""
    cooperativity = _opt(args, "cooperativity")
    system_c = None
    contour_c = None
    if cooperativity is not None:
        if task is Task.CONTOUR:
            contour_c = list(cooperativity)
        elif len(cooperativity) != 1:
            raise ConfigError(f"--C takes a single value for {task.value}")
        else:
            system_c = cooperativity[0]

    return {
        "task": task.value,
        "target": _opt(args, "target"),
        "units": _opt(args, "units"),
        "seed": _opt(args, "seed"),
        "jobs": _opt(args, "jobs"),
        "system": {
            "kappa": _opt(args, "kappa"),
            "gamma_m": _opt(args, "gamma_m"),
            "omega_m": _opt(args, "omega_m"),
            "g": _opt(args, "g"),
            "cooperativity": system_c,
        },
        "drive": {
            "mode": _opt(args, "mode"),
            "delta_c": _opt(args, "delta_c"),
            "delta_m": _opt(args, "delta_m"),
            "delta_c_norm": _opt(args, "dc_norm"),
            "delta_m_norm": _opt(args, "dm_norm"),
        },
        "sweep": {
            "dm_range": _opt(args, "dm_range"),
            "dc_range": _opt(args, "dc_range"),
            "dm_points": _opt(args, "dm_points"),
            "dc_points": _opt(args, "dc_points") if task is not Task.CONTOUR else None,
            "axis_units": _opt(args, "axis_units"),
            "quantities": _opt(args, "quantities"),
            "points_file": _opt(args, "points_file"),
        },
        "noise": {
            "n_th": _opt(args, "n_th"),
            "n_ba": _opt(args, "n_ba"),
        },
        "spectrum": {
            "omega_min": _opt(args, "omega_min"),
            "omega_max": _opt(args, "omega_max"),
            "points": _opt(args, "points"),
        },
        "simulate": {
            "dt": _opt(args, "dt"),
            "duration": _opt(args, "duration"),
            "scheme": _opt(args, "scheme"),
            "seeds": _opt(args, "seeds"),
            "nonrwa": _flag(args, "nonrwa"),
        },
        "contour": {
            "cooperativities": contour_c,
            "dc_points": _opt(args, "dc_points") if task is Task.CONTOUR else None,
        },
        "output": {
            "dir": _opt(args, "out"),
            "formats": _opt(args, "format"),
            "plot": _flag(args, "plot"),
        },
    }


def _drop_conflicts(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Remove file keys made redundant by an equivalent flag."""
    base = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for section, pairs in EXCLUSIVE_KEYS.items():
        given = overrides.get(section, {})
        table = base.get(section)
        if not isinstance(table, dict):
            continue
        for first, second in pairs:
            if given.get(first) is not None:
                table.pop(second, None)
            if given.get(second) is not None:
                table.pop(first, None)
    return base


def resolve_args(task: Task, args: argparse.Namespace) -> RunConfig:
    """Resolved configuration for a command: file values overridden by flags."""
    overrides = build_overrides(task, args)
    config_path = _opt(args, "config")
    base = load_config_file(config_path) if config_path else {}
    return RunConfig.from_dict(merge(_drop_conflicts(base, overrides), overrides))


def _run(task: Task, args: argparse.Namespace) -> int:
    """Resolve, run and report one task, mapping failures to exit codes."""
    verbose = getattr(args, "verbose", False)
    quiet = getattr(args, "quiet", False)
    try:
        config = resolve_args(task, args)
        report = Runner(config, show_progress=not quiet).run()

        if getattr(args, "json", False):
            print(report.to_json())
        elif not quiet:
            print(report)
        if report.partial:
            logger.warning("Some cells or rows failed; results are partial")
        return EXIT_PARTIAL if report.partial else EXIT_OK

    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        if verbose:
            raise
        return EXIT_CONFIG
    except UnstableSpectrumError as e:
        logger.error(f"Spectrum requested at an unstable point: {e}")
        if verbose:
            raise
        return EXIT_UNSTABLE_SPECTRUM
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}")
        if verbose:
            raise
        return EXIT_NUMERICAL
    except KeyboardInterrupt:
        raise
    except Exception as e:
        logger.error(f"{task.value.capitalize()} failed: {e}")
        if verbose:
            raise
        return EXIT_NUMERICAL


def cmd_map(args: argparse.Namespace) -> int:
    """Execute map command.

    Args:
        args: Parsed command-line arguments

    Returns:
        Exit code
    """
    return _run(Task.MAP, args)


def cmd_contour(args: argparse.Namespace) -> int:
    """Execute contour command."""
    return _run(Task.CONTOUR, args)


def cmd_spectrum(args: argparse.Namespace) -> int:
    """Execute spectrum command.

    Returns 4 when the requested point is not stable.
    """
    return _run(Task.SPECTRUM, args)


def cmd_simulate(args: argparse.Namespace) -> int:
    """Execute simulate command."""
    return _run(Task.SIMULATE, args)


def cmd_reproduce(args: argparse.Namespace) -> int:
    """Execute reproduce command."""
    return _run(Task.REPRODUCE, args)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file")
    common.add_argument(
        "--units",
        choices=["angular", "hz"],
        help="Units of rates in the file and flags (hz values are multiplied by 2π)",
    )
    common.add_argument("--out", help="Output directory (default: $TWOTONE_OUT or ./twotone-out)")
    common.add_argument(
        "--format", nargs="+", choices=["csv", "json"], help="Artifact formats (default: both)"
    )
    common.add_argument("--plot", action="store_true", help="Also write SVG figures")
    common.add_argument("--seed", type=int, help="Base random seed")
    common.add_argument("--jobs", type=int, help="Worker threads (default: auto-detect)")
    common.add_argument("--json", action="store_true", help="Print the run report as JSON")
    return common


def _add_system(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("system")
    group.add_argument("--kappa", type=float, help="Cavity linewidth κ")
    group.add_argument("--gamma-m", type=float, help="Mechanical linewidth Γm")
    group.add_argument("--omega-m", type=float, help="Mechanical frequency Ωm")
    group.add_argument("--g", type=float, help="Coupling rate g")
    group.add_argument(
        "--C", dest="cooperativity", type=float, nargs="+", help="Cooperativity C = 4g²/(κΓm)"
    )


def _add_drive(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("drive")
    group.add_argument("--mode", choices=["two_tone_balanced", "single_tone_upper"])
    group.add_argument("--delta-c", type=float, help="Cavity detuning Δc")
    group.add_argument("--delta-m", type=float, help="Mechanical detuning Δm")
    group.add_argument("--dc-norm", type=float, help="Normalized cavity detuning 2Δc/κ")
    group.add_argument("--dm-norm", type=float, help="Normalized mechanical detuning 2Δm/Γm")


def _add_noise(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("noise")
    group.add_argument("--n-th", type=float, help="Mechanical thermal occupation")
    group.add_argument("--n-ba", type=float, help="Cavity input noise occupation")


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Main CLI entry point."""
    parser = argparse.ArgumentParser(
        description="twotone - linear stability, spectra and dynamics of two-tone optomechanics",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  twotone map --C 14 --dm-range -18:18 --dc-range -0.3:0.3
  twotone contour --C 1 1.5 2 3.5 7 14 --plot
  twotone spectrum --C 2 --dc-norm 0.1 --dm-norm 4 --n-th 7
  twotone simulate --C 2 --delta-c 0.5 --delta-m -0.5 --seeds 8
  twotone reproduce --target fig5 --out results/
        """,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable verbose output")
    parser.add_argument("-q", "--quiet", action="store_true", help="Suppress non-error output")

    common = _common_parser()
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    map_parser = subparsers.add_parser(
        "map", parents=[common], help="Stability map over (Δ̃m, Δ̃c)"
    )
    _add_system(map_parser)
    _add_noise(map_parser)
    map_parser.add_argument("--dm-range", help="Δ̃m range low:high")
    map_parser.add_argument("--dc-range", help="Δ̃c range low:high")
    map_parser.add_argument("--dm-points", type=int, help="Grid points along Δ̃m")
    map_parser.add_argument("--dc-points", type=int, help="Grid points along Δ̃c")
    map_parser.add_argument(
        "--axis-units", choices=["normalized", "kappa"], help="Units of the range flags"
    )
    map_parser.add_argument(
        "--quantities", nargs="+", choices=list(MAP_QUANTITIES), help="Quantities to map"
    )
    map_parser.add_argument(
        "--points-file", help="CSV of scattered (Δ̃m, Δ̃c) points to rasterize"
    )

    contour_parser = subparsers.add_parser(
        "contour", parents=[common], help="Analytic threshold contours"
    )
    _add_system(contour_parser)
    contour_parser.add_argument("--dc-points", type=int, help="Δ̃c samples per contour")

    spectrum_parser = subparsers.add_parser(
        "spectrum", parents=[common], help="Output spectrum at a stable point"
    )
    _add_system(spectrum_parser)
    _add_drive(spectrum_parser)
    _add_noise(spectrum_parser)
    spectrum_parser.add_argument(
        "--omega-min", type=float, help="Lowest frequency (default: adaptive)"
    )
    spectrum_parser.add_argument("--omega-max", type=float, help="Highest frequency")
    spectrum_parser.add_argument("--points", type=int, help="Frequency points")

    simulate_parser = subparsers.add_parser(
        "simulate", parents=[common], help="Stochastic time-domain integration"
    )
    _add_system(simulate_parser)
    _add_drive(simulate_parser)
    _add_noise(simulate_parser)
    simulate_parser.add_argument("--scheme", choices=["euler_maruyama", "exact_ou"])
    simulate_parser.add_argument("--dt", type=float, help="Time step")
    simulate_parser.add_argument("--duration", type=float, help="Total integration time")
    simulate_parser.add_argument("--seeds", type=int, help="Number of trajectories")
    simulate_parser.add_argument(
        "--nonrwa", action="store_true", help="Integrate without the rotating-wave approximation"
    )

    reproduce_parser = subparsers.add_parser(
        "reproduce", parents=[common], help="Run a pinned reproduction recipe"
    )
    reproduce_parser.add_argument(
        "--target", required=True, choices=[t.value for t in ReproduceTarget]
    )

    raw = sys.argv[1:] if argv is None else argv
    args = parser.parse_args(_normalize_argv(raw))

    verbose = getattr(args, "verbose", False)
    quiet = getattr(args, "quiet", False)
    setup_logging(verbose, quiet)

    if not args.command:
        parser.print_help()
        sys.exit(EXIT_CONFIG)

    commands = {
        "map": cmd_map,
        "contour": cmd_contour,
        "spectrum": cmd_spectrum,
        "simulate": cmd_simulate,
        "reproduce": cmd_reproduce,
    }
    try:
        sys.exit(commands[args.command](args))
    except KeyboardInterrupt:
        print("\n\nOperation cancelled by user")
        sys.exit(EXIT_INTERRUPTED)


if __name__ == "__main__":
    main()

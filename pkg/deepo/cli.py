"""
Command-line entry point.

    deepo offline --config configs/offline.yaml --seed 0,1,2 --out results
    deepo list

Exit codes: 0 when every in-run check passes, 1 when some check fails,
2 on a configuration error, 3 on a numerical failure (a diagnostics file is
written next to the outputs).
"""
import argparse
from pathlib import Path
from typing import List, Optional, Sequence

from rich.console import Console
from rich.table import Table

from deepo.core.config import settings
from deepo.core.errors import ExperimentConfigError, GenerationError, NumericalError
from deepo.core.logging import configure_logging, logger
from deepo.schemas.experiment import ExperimentResult
from deepo.services.experiments import EXPERIMENTS, SUBCOMMANDS, build_config, run_experiment
from deepo.utils.io import write_diagnostics

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

console = Console()


def parse_seeds(value: str) -> List[int]:
    """
    "3" -> [3], "1,4,7" -> [1, 4, 7], "0-4" -> [0, 1, 2, 3, 4].
    """
    seeds: List[int] = []
    try:
        for part in value.split(","):
            part = part.strip()
            if "-" in part[1:]:
                low, high = part.split("-", 1)
                seeds.extend(range(int(low), int(high) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid seed list {value!r}") from e
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepo",
        description="Seeded experiments for data-enabled policy optimization of the LQR",
    )
    parser.add_argument("--log-level", default=None, help="Overrides DEEPO_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for name, (subcommand, claim) in EXPERIMENTS.items():
        sub = subparsers.add_parser(subcommand, help=claim)
        sub.add_argument("--config", default=None, help="YAML experiment config")
        sub.add_argument("--seed", type=parse_seeds, default=None, help="Seed, list or range")
        sub.add_argument("--out", default=None, help="Output directory")
        sub.add_argument(
            "--save-trajectory",
            action="store_true",
            help="Also write the offline batch of every seed as a trajectory CSV",
        )
        sub.set_defaults(experiment=name)

    subparsers.add_parser("list", help="List experiments and the claims they check")
    return parser


def print_experiments() -> None:
    table = Table(title="Experiments")
    table.add_column("subcommand", style="cyan")
    table.add_column("experiment")
    table.add_column("claim checked")
    for name, (subcommand, claim) in EXPERIMENTS.items():
        table.add_row(subcommand, name, claim)
    console.print(table)


def print_verdicts(result: ExperimentResult) -> None:
    for check in result.checks:
        verdict = "[green]PASS[/green]" if check.passed else "[red]FAIL[/red]"
        console.print(f"{verdict} {check.name}: {check.detail}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    if args.command == "list":
        print_experiments()
        return EXIT_OK

    output_dir = args.out
    try:
        config = build_config(
            args.experiment,
            args.config,
            seeds=args.seed,
            output_dir=output_dir,
            save_trajectory=args.save_trajectory,
        )
    except ExperimentConfigError as e:
        logger.error(f"Configuration error: {e}")
        for error in e.details.get("errors", []):
            console.print(f"[red]{'.'.join(str(p) for p in error['loc'])}[/red]: {error['msg']}")
        return EXIT_CONFIG

    try:
        result = run_experiment(config)
    except (NumericalError, GenerationError) as e:
        directory = Path(config.output_dir) / config.experiment
        if settings.diagnostics_file:
            write_diagnostics(e, directory / settings.diagnostics_file)
        console.print(f"[red]Numerical failure[/red]: {type(e).__name__}: {e}")
        return EXIT_NUMERICAL

    print_verdicts(result)
    return EXIT_OK if result.passed else EXIT_CHECKS_FAILED


__all__ = ["main", "build_parser", "parse_seeds"]

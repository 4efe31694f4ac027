"""Command-line entry point: varlocal {analyze,probe-qc,sequence,decompose,measures,localize}."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ParseError, ValidationError
from .report import OrchestrationError, emit, run_scenario
from .scenario import DecompositionSpec, LocalizationSpec, MeasuresSpec, SequenceSpec, parse_scenario

EXIT_OK, EXIT_INPUT, EXIT_RUN = 0, 2, 3

# batteries each subcommand runs; None runs everything the scenario requests
SUBCOMMANDS = {
    "analyze": None,
    "probe-qc": ["qc_interior", "qc_boundary"],
    "sequence": ["sequences"],
    "decompose": ["decomposition"],
    "measures": ["measures"],
    "localize": ["localization"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varlocal", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} batteries of a scenario")
        p.add_argument("--config", required=True, help="scenario file (YAML or JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--out", default=None, help="output directory (default: scenario output.dir)")
        p.add_argument("--format", choices=("json", "csv"), default=None, help="report format")
    return parser


def _with_defaults(scenario, command: str):
    """Subcommands switch on their battery with default settings when the scenario leaves it out."""
    b = scenario.battery
    if command == "sequence" and not b.sequences:
        b.sequences = [SequenceSpec(kind="weak"), SequenceSpec(kind="needle")]
    elif command == "decompose" and b.decomposition is None:
        b.decomposition = DecompositionSpec()
    elif command == "measures" and b.measures is None:
        b.measures = MeasuresSpec()
    elif command == "localize" and b.localization is None:
        b.localization = LocalizationSpec()
    return scenario


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        scenario = parse_scenario(args.config)
    except (ParseError, ValidationError) as exc:
        print(f"varlocal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.seed is not None:
        scenario.seed = args.seed
    scenario = _with_defaults(scenario, args.command)
    out = args.out or scenario.output.dir
    fmt = args.format or scenario.output.format
    try:
        report = run_scenario(scenario, SUBCOMMANDS[args.command])
        paths = emit(report, out, fmt)
    except (OrchestrationError, OSError) as exc:
        print(f"varlocal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN
    for p in paths:
        print(p)
    print(report.verdict.get("summary", ""))
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point: ``mtpref <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .cmdp import ValidationError, validate_cmdp
from .harness import EXIT_CONFIG, EXIT_OK, ConfigError, MissingArtifacts, report, run_experiment
from .preference import validate_preference

EXIT_ERROR = 3

SECTIONS = {
    "solve": ("runs",),
    "nash": ("nash",),
    "pg-train": ("pg",),
    "compare": ("runs", "pg", "compare"),
}


def _validate(args) -> int:
    try:
        cmdp = validate_cmdp(args.cmdp_file)
        info = {
            "contexts": len(cmdp.context_ids),
            "horizon": cmdp.horizon,
            "layer_sizes": list(cmdp.layer_sizes),
            "actions": len(cmdp.action_ids),
            "mu_min": cmdp.mu_min,
        }
        if args.preference:
            pref = validate_preference(args.preference, cmdp)
            info["preference_form"] = pref.form
    except ValidationError as exc:
        for v in exc.violations:
            print(f"error: {v}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def _experiment(args) -> int:
    try:
        result = run_experiment(args.config, sections=SECTIONS[args.command])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # surfaced component failure; the manifest records the stage
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for fail in result.manifest["failures"]:
        print("bound violated: " + ", ".join(f"{k}={fail[k]}" for k in sorted(fail)), file=sys.stderr)
    if not args.no_report:
        try:
            print(report(result.output_dir), end="")
        except MissingArtifacts:
            pass
    print(f"output: {result.output_dir}", file=sys.stderr)
    return result.exit_code


def _report(args) -> int:
    try:
        print(report(args.dir), end="")
    except MissingArtifacts as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtpref", description="Tabular multi-turn preference optimization")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a CMDP document (and optionally a preference document)")
    p.add_argument("cmdp_file")
    p.add_argument("--preference", help="preference document to check against the CMDP")
    p.set_defaults(func=_validate)

    helps = {
        "solve": "run the configured solver runs",
        "nash": "compute and certify the regularized Nash equilibrium",
        "pg-train": "run sampled policy-gradient training",
        "compare": "run solvers and emit the side-by-side preference matrix",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="experiment config (JSON)")
        p.add_argument("--no-report", action="store_true", help="skip printing the report")
        p.set_defaults(func=_experiment)

    p = sub.add_parser("report", help="summarize a finished experiment directory")
    p.add_argument("dir")
    p.set_defaults(func=_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``fdepr <subcommand> config.toml``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as config_mod
from .analysis_fit import FitError
from .bloch_dynamics import IntegrationError
from .config import ConfigError
from .fluorescence_sim import CoverageError
from .recipes import ExperimentRecipe, run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

SUBCOMMANDS = {
    "spectrum": "spectrum",
    "rotation": "rotation_pattern",
    "fluorescence": "fluorescence",
    "sweep": "count_sweep",
    "snr": "snr_compare",
    "rabi": "rabi",
    "bath-rabi": "bath_rabi",
    "fit": "fit",
}

log = logging.getLogger("fdepr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdepr", description="Fluorescence-detected EPR simulations.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "spectrum": "counts versus static field",
        "rotation": "resonance field versus in-plane angle",
        "fluorescence": "emission curve after one pulse, optional click records",
        "sweep": "counts versus pulse strength with the thin-wire closed forms",
        "snr": "fluorescence versus echo detection signal-to-noise",
        "rabi": "counts versus pulse duration and the damped-oscillation fit",
        "bath-rabi": "Rabi oscillation averaged over nuclear-spin configurations",
        "fit": "fit a model to two columns of a CSV file",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="TOML run configuration")
        p.add_argument("-o", "--output-dir", help="overrides [output].directory")
        p.add_argument("--seed", type=int, help="overrides [simulation].seed")
        if name == "fit":
            p.add_argument("--input", help="overrides [simulation].fit_input")
            p.add_argument("--model", help="overrides [simulation].fit_model")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_mod.load(args.config)
        if args.output_dir is not None:
            cfg.output["directory"] = args.output_dir
        if args.seed is not None:
            cfg.simulation["seed"] = args.seed
        if args.command == "fit":
            if args.input is not None:
                cfg.simulation["fit_input"] = args.input
            if args.model is not None:
                cfg.simulation["fit_model"] = args.model
        recipe = ExperimentRecipe.from_config(SUBCOMMANDS[args.command], cfg)
        result, manifest = run(recipe)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrationError, FitError, CoverageError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("wrote %s", manifest)
    print(manifest)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

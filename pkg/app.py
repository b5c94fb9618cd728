"""App Main Entry Point - Kommandozeile für Takagi-Flächen-Experimente

Verwendung:
    python app.py boxdim --family hexagonal --alpha 0.5 --scales 2^-4..2^-10
    python app.py raster --D 2 --lambda 1.5 --alpha 1 --beta 1 --grid 512
    python app.py verify-suite --seed 7
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from controllers import EXIT_USAGE, ExperimentController
from models import Command, ExperimentSpec, TakagiError, parse_scales


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# CLI-Ziel → Schlüssel im verschachtelten Modell
BUDGET_FLAGS = ("density_samples", "decay_trials", "lipschitz_trials", "scaling_trials")
SAMPLING_FLAGS = ("k_start", "k_max", "rel_tol", "max_points")


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Ungültige Zahlenliste: {text}") from e


def _scales(text: str) -> List[float]:
    try:
        return parse_scales(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


# ===== Parser =====

def _add_common(parser: argparse.ArgumentParser) -> None:
    """Flags, die jedes Kommando versteht"""
    group = parser.add_argument_group("Feld")
    group.add_argument("--config", help="JSON-Spezifikation; explizite Flags überschreiben sie")
    group.add_argument("--family", choices=["voronoi", "hexagonal", "dyadic"])
    group.add_argument("--D", "--dimension", dest="dimension", type=int)
    group.add_argument("--lambda", dest="lam", type=float)
    group.add_argument("--alpha", type=float)
    group.add_argument("--beta", type=float)
    group.add_argument("--H", "--hurst", dest="hurst", type=float)
    group.add_argument("--depth", type=int)
    group.add_argument("--margin", type=float)
    group.add_argument("--seed", type=int)

    run = parser.add_argument_group("Lauf")
    run.add_argument("--output-dir", dest="output_dir")
    run.add_argument("--threads", type=int)
    run.add_argument("--allow-flagged", dest="allow_flagged", action="store_true")
    run.add_argument("--log-level", dest="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _add_sampling(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scales", type=_scales, help="z.B. 2^-4..2^-10 oder 0.1,0.05")
    parser.add_argument("--k-start", dest="k_start", type=int)
    parser.add_argument("--k-max", dest="k_max", type=int)
    parser.add_argument("--rel-tol", dest="rel_tol", type=float)
    parser.add_argument("--max-points", dest="max_points", type=int)


def build_parser() -> argparse.ArgumentParser:
    """Erzeuge den Parser mit allen Unterkommandos"""
    parser = argparse.ArgumentParser(
        prog="takagi",
        description="Zufällige Takagi-Knopp-Flächen auf Voronoi-, Sechseck- und Dyadik-Zerlegungen",
        argument_default=argparse.SUPPRESS,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    raster = commands.add_parser(Command.RASTER.value, help="Feld auf einem Gitter auswerten",
                                 argument_default=argparse.SUPPRESS)
    _add_common(raster)
    raster.add_argument("--grid", type=int)
    raster.add_argument("--export-nuclei", dest="export_nuclei", action="store_true")

    boxdim = commands.add_parser(Command.BOXDIM.value, help="Box-Zählung und Dimensionsschätzung",
                                 argument_default=argparse.SUPPRESS)
    _add_common(boxdim)
    _add_sampling(boxdim)

    oscillation = commands.add_parser(Command.OSCILLATION.value, help="Oszillationsprofil",
                                      argument_default=argparse.SUPPRESS)
    _add_common(oscillation)
    _add_sampling(oscillation)
    oscillation.add_argument("--cubes", type=int)

    energy = commands.add_parser(Command.ENERGY.value, help="s-Energie des Graphen",
                                 argument_default=argparse.SUPPRESS)
    _add_common(energy)
    energy.add_argument("--s", dest="s_values", type=_float_list)
    energy.add_argument("--energy-n", dest="energy_n", type=int)
    energy.add_argument("--pairs", type=int)
    energy.add_argument("--shells", type=int)

    suite = commands.add_parser(Command.VERIFY_SUITE.value, help="Statistische Prüfungen",
                                argument_default=argparse.SUPPRESS)
    _add_common(suite)
    suite.add_argument("--negative-control", dest="negative_control", action="store_true")
    suite.add_argument("--density-samples", dest="density_samples", type=int)
    suite.add_argument("--decay-trials", dest="decay_trials", type=int)
    suite.add_argument("--lipschitz-trials", dest="lipschitz_trials", type=int)
    suite.add_argument("--scaling-trials", dest="scaling_trials", type=int)
    return parser


# ===== Spezifikation =====

def load_config(path: str) -> Dict[str, Any]:
    """
    Lade eine JSON-Spezifikation

    Raises:
        TakagiError: Datei fehlt oder ist kein JSON-Objekt
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise TakagiError(f"Konfiguration nicht lesbar: {path}") from e
    if not isinstance(data, dict):
        raise TakagiError(f"Konfiguration muss ein JSON-Objekt sein: {path}")
    return data


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    """Führe Konfigurationsdatei und Flags zu einer ExperimentSpec zusammen"""
    values = vars(args).copy()
    values.pop("log_level", None)
    config_path = values.pop("config", None)
    merged: Dict[str, Any] = load_config(config_path) if config_path else {}

    for key, nested in (("budgets", BUDGET_FLAGS), ("sampling", SAMPLING_FLAGS)):
        overrides = {name: values.pop(name) for name in nested if name in values}
        if overrides:
            merged[key] = {**merged.get(key, {}), **overrides}
    merged.update(values)
    if "output_dir" in merged:
        merged["output_dir"] = Path(merged["output_dir"])
    return ExperimentSpec(**merged)


# ===== Main =====

def main(argv: Optional[List[str]] = None) -> int:
    """
    Einstiegspunkt der CLI

    Returns:
        Exit-Code (0 ok, 1 markiert/fehlgeschlagen, 2 Bedienfehler)
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0

    logging.basicConfig(level=getattr(args, "log_level", "INFO"), format=LOG_FORMAT)

    try:
        spec = spec_from_args(args)
    except ValidationError as e:
        logger.error("Ungültige Parameter: %s", e)
        return EXIT_USAGE
    except (TakagiError, ValueError) as e:
        logger.error("%s", e)
        return EXIT_USAGE

    try:
        result = ExperimentController().run(spec)
    except TakagiError as e:
        # Parameterfehler aus der Bibliothek sind Bedienfehler
        logger.error("Abbruch: %s", e)
        return EXIT_USAGE

    for path in result.files:
        print(path)
    for message in result.messages:
        logger.info("%s", message)
    return result.status


if __name__ == "__main__":
    sys.exit(main())

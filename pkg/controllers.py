"""Controllers - Geschäftslogik zwischen CLI und Bibliothek"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from field import FieldRealization, default_depth, export_raster
from fractal import (
    box_count_report, energy_integral, estimate_dimension, hexagonal_cell_bound, oscillation_profile,
)
from models import (
    Command, DegenerateError, EvaluationError, Family, InsufficientDataError,
    ReportStorage, ExperimentSpec, VerificationResult,
)
from pointprocess import export_nuclei_csv
from verify import empirical_density_Z1D, lipschitz_mean, oscillation_set_decay, scaling_invariance_test


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FLAGGED = 1
EXIT_USAGE = 2

DEFAULT_DEPTH = 12
HEX_BOUND_MAX_GENERATION = 8

# Vorab festgelegte Parameter der Verifikation
DENSITY_CASE = {"lam": 2.0, "alpha": 0.5, "beta": 1.0, "hurst": 1.2, "n": 2}
DECAY_CASE = {"lam": 2.0, "beta": 1.0, "hurst": 1.5,
              "grid": [(n, big_n) for n in range(4) for big_n in range(4, 8)]}
LIPSCHITZ_CONDITIONS = [(1, 2), (2, 3), (2, 4)]
SCALING_CASE = {"lam": 2.0, "beta": 1.0, "n": 3, "dimension": 2}


@dataclass
class RunResult:
    """Ergebnis eines Experiments: Exit-Status und geschriebene Dateien"""
    status: int
    files: List[Path] = field(default_factory=list)
    messages: List[str] = field(default_factory=list)

    def flag(self, message: str) -> None:
        logger.warning(message)
        self.messages.append(message)
        self.status = max(self.status, EXIT_FLAGGED)


# ===== EXPERIMENT CONTROLLER =====

class ExperimentController:
    """Controller für Experimente (Raster, Box-Dimension, Oszillation, Energie, Verifikation)"""

    def __init__(self, storage: Optional[ReportStorage] = None):
        """Initialisiere ExperimentController

        Args:
            storage: Ziel für Berichte; ohne Angabe das Ausgabeverzeichnis der Spezifikation
        """
        self.storage = storage

    def _storage_for(self, spec: ExperimentSpec) -> ReportStorage:
        return self.storage or ReportStorage(str(spec.output_dir))

    def _realization(self, spec: ExperimentSpec, depth: int) -> FieldRealization:
        return FieldRealization.build(spec.field_config(depth), workers=spec.threads)

    def _analysis_depth(self, spec: ExperimentSpec) -> int:
        if spec.depth is not None:
            return spec.depth
        return default_depth(spec.field_config(), min(spec.scales))

    # ===== Dispatch =====

    def run(self, spec: ExperimentSpec) -> RunResult:
        """
        Führe das Experiment der Spezifikation aus

        Returns:
            RunResult (0 ok, 1 markiert/fehlgeschlagen)
        """
        handlers = {
            Command.RASTER: self.run_raster,
            Command.BOXDIM: self.run_boxdim,
            Command.OSCILLATION: self.run_oscillation,
            Command.ENERGY: self.run_energy,
            Command.VERIFY_SUITE: self.verify_suite,
        }
        logger.info("Starte %s (Digest %s)", spec.command.value, spec.digest())
        try:
            return handlers[spec.command](spec)
        except EvaluationError as e:
            logger.error("Auswertung fehlgeschlagen: %s", e)
            return RunResult(status=EXIT_FLAGGED, messages=[str(e)])

    # ===== Raster =====

    def run_raster(self, spec: ExperimentSpec) -> RunResult:
        """Schreibe raster.csv (und optional nuclei.csv)"""
        storage = self._storage_for(spec)
        digest = spec.digest()
        real = self._realization(spec, spec.depth if spec.depth is not None else DEFAULT_DEPTH)
        result = RunResult(status=EXIT_OK)
        export_raster(real, spec.grid, storage, digest)
        result.files.append(storage.path("raster.csv"))
        self._export_nuclei(spec, real, storage, digest, result)
        return result

    def _export_nuclei(self, spec: ExperimentSpec, real: FieldRealization, storage: ReportStorage,
                       digest: str, result: RunResult) -> None:
        if not spec.export_nuclei:
            return
        if spec.family != Family.VORONOI:
            result.messages.append("Kernexport nur für die Voronoi-Familie")
            return
        export_nuclei_csv([real.nuclei(n) for n in range(real.config.depth + 1)], storage, digest)
        result.files.append(storage.path("nuclei.csv"))

    # ===== Box-Dimension =====

    def run_boxdim(self, spec: ExperimentSpec) -> RunResult:
        """Schreibe boxcount.csv und dimension.json"""
        storage = self._storage_for(spec)
        digest = spec.digest()
        real = self._realization(spec, self._analysis_depth(spec))
        result = RunResult(status=EXIT_OK)

        report = box_count_report(real, spec.scales, spec.sampling, workers=spec.threads, config_digest=digest)
        storage.save_csv(
            "boxcount.csv", ["tau", "n_boxes", "samples_per_cell", "flagged"],
            [[c.tau, c.n_boxes, c.samples_per_cell, c.flagged] for c in report.counts], digest,
        )
        result.files.append(storage.path("boxcount.csv"))
        flagged = [c.tau for c in report.counts if c.flagged]
        if flagged and not spec.allow_flagged:
            result.flag(f"{len(flagged)} Skalen ohne stabile Oszillation")
        if report.flagged and not spec.allow_flagged:
            result.flag(f"N(τ) nicht monoton bei τ={report.non_monotone}")

        try:
            estimate = estimate_dimension(report, include_flagged=spec.allow_flagged)
        except InsufficientDataError as e:
            result.flag(str(e))
            return result
        payload = {
            "slope": estimate.slope,
            "intercept": estimate.intercept,
            "ci": list(estimate.ci),
            "half_width": estimate.half_width,
            "tau_range": list(estimate.tau_range),
            "scales_used": estimate.scales_used,
            "residuals": list(estimate.residuals),
            "flagged_scales": flagged,
            "non_monotone_scales": report.non_monotone,
            "depth": real.config.depth,
            "truncation_bound": real.truncation_bound,
            "truncation_scale": real.truncation_scale,
            "field_digest": real.config.digest(),
        }
        storage.save_json("dimension.json", payload, digest)
        result.files.append(storage.path("dimension.json"))
        logger.info("Steigung %.4f ± %.4f", estimate.slope, estimate.half_width)
        return result

    # ===== Oszillation =====

    def run_oscillation(self, spec: ExperimentSpec) -> RunResult:
        """Schreibe oscillation.csv und oscillation.json (inkl. Sechseck-Zellschranke)"""
        storage = self._storage_for(spec)
        digest = spec.digest()
        real = self._realization(spec, self._analysis_depth(spec))
        result = RunResult(status=EXIT_OK)

        profile = oscillation_profile(real, spec.scales, spec.cubes, spec.seed, spec.sampling,
                                      alpha=real.config.alpha / real.config.beta)
        storage.save_csv("oscillation.csv", ["tau", "mean", "min", "max", "flagged"], profile.rows(), digest)
        result.files.append(storage.path("oscillation.csv"))
        if any(profile.flagged) and not spec.allow_flagged:
            result.flag("Oszillationsprofil enthält nicht stabilisierte Skalen")

        payload: Dict[str, Any] = {
            "slope": profile.slope,
            "alpha": profile.alpha,
            "lower_constant": profile.lower_constant,
            "upper_constant": profile.upper_constant,
            "depth": real.config.depth,
            "truncation_bound": real.truncation_bound,
        }
        if spec.family == Family.HEXAGONAL:
            bounds = []
            for generation in range(1, min(HEX_BOUND_MAX_GENERATION, real.config.depth) + 1):
                bound = hexagonal_cell_bound(real, generation)
                bounds.append({"N": generation, "cells": bound.cells, "min_oscillation": bound.min_oscillation,
                               "bound": bound.bound, "truncation_bound": bound.truncation_bound,
                               "pass": bound.passed})
                if not bound.passed:
                    result.flag(f"Zellschranke verletzt für N={generation}")
            payload["cell_bounds"] = bounds
        storage.save_json("oscillation.json", payload, digest)
        result.files.append(storage.path("oscillation.json"))
        return result

    # ===== Energie =====

    def run_energy(self, spec: ExperimentSpec) -> RunResult:
        """Schreibe energy.csv (eine Zeile pro s)"""
        storage = self._storage_for(spec)
        digest = spec.digest()
        real = self._realization(spec, spec.depth if spec.depth is not None else DEFAULT_DEPTH)
        result = RunResult(status=EXIT_OK)
        rows = []
        for s in spec.s_values:
            try:
                e = energy_integral(real, s, spec.energy_n, spec.pairs, spec.seed, shells=spec.shells)
            except DegenerateError as err:
                # auch mit --allow-flagged ein Fehler
                logger.error("Energie s=%.2f: %s", s, err)
                result.messages.append(str(err))
                result.status = EXIT_FLAGGED
                continue
            rows.append([e.s, e.estimate, e.stderr, e.pairs, e.acceptance_rate, e.n_start, e.hurst,
                         e.shells[0], e.shells[1], e.min_distance])
        storage.save_csv(
            "energy.csv",
            ["s", "estimate", "stderr", "pairs", "acceptance_rate", "n_start", "hurst",
             "shell_first", "shell_last", "min_distance"],
            rows, digest,
        )
        result.files.append(storage.path("energy.csv"))
        return result

    # ===== Verifikation =====

    def verify_suite(self, spec: ExperimentSpec) -> RunResult:
        """
        Führe die vier statistischen Prüfungen mit den vorab festgelegten Budgets aus

        Returns:
            RunResult mit Status 0 genau dann, wenn alle Prüfungen bestehen
        """
        storage = self._storage_for(spec)
        digest = spec.digest()
        budgets = spec.budgets
        results: List[VerificationResult] = []

        case = DENSITY_CASE
        tau = case["lam"] ** (-case["n"] * case["hurst"])
        results.append(empirical_density_Z1D(
            case["lam"], case["alpha"], case["beta"], case["hurst"], case["n"], 0.0, tau / 2.0,
            budgets.density_samples, spec.seed,
        ).as_result())

        results.append(oscillation_set_decay(
            DECAY_CASE["lam"], DECAY_CASE["beta"], DECAY_CASE["hurst"], DECAY_CASE["grid"],
            budgets.decay_trials, spec.seed,
        ).as_result())

        plain = lipschitz_mean(1, budgets.lipschitz_trials, spec.seed)
        results.append(plain.as_result())
        conditioned = [
            lipschitz_mean(1, budgets.lipschitz_trials, spec.seed,
                           conditioning=(n, big_n, DECAY_CASE["hurst"], DECAY_CASE["lam"], DECAY_CASE["beta"]))
            for n, big_n in LIPSCHITZ_CONDITIONS
        ]
        results.append(VerificationResult(
            name="lipschitz_conditioning",
            parameters={"pairs": [list(p) for p in LIPSCHITZ_CONDITIONS], "trials": budgets.lipschitz_trials},
            statistic=max(c.mean for c in conditioned), threshold=plain.mean,
            passed=all(c.mean <= plain.mean for c in conditioned),
            details={"conditioned_means": [c.mean for c in conditioned]},
        ))

        results.append(scaling_invariance_test(
            SCALING_CASE["lam"], SCALING_CASE["beta"], SCALING_CASE["n"], budgets.scaling_trials, spec.seed,
            dimension=SCALING_CASE["dimension"], negative_control=spec.negative_control,
        ).as_result())

        all_passed = all(r.passed for r in results)
        storage.save_json("verify_report.json",
                          {"results": [r.to_dict() for r in results], "all_passed": all_passed}, digest)
        result = RunResult(status=EXIT_OK, files=[storage.path("verify_report.json")])
        for r in results:
            if not r.passed:
                result.flag(f"Prüfung {r.name} nicht bestanden (Statistik {r.statistic:.4g})")
        return result

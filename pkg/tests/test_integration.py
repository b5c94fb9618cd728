"""Integrationstests für Controller und ReportStorage

ÜBERSICHT:
==========
Diese Tests führen Experimente mit echtem Dateisystem (tmp_path) aus.
Geprüft werden Ausgabedateien, Kopfzeilen, Exit-Status und die
bitgenaue Wiederholbarkeit bei gleichem Seed.

STRUKTUR:
- Fixtures: Storage und Controller auf tmp_path
- TestRasterIntegration: raster.csv und nuclei.csv
- TestAnalysisIntegration: boxcount.csv, dimension.json, oscillation.json, energy.csv
- TestVerifySuiteIntegration: verify_report.json mit kleinen Budgets

ANPASSUNGEN:
- Größere Läufe: Budgets in den Spezifikationen erhöhen
"""

import json
import os
import sys

import pytest

# Pfad-Setup: Erlaubt Imports aus dem Projektwurzelverzeichnis
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from controllers import EXIT_FLAGGED, EXIT_OK, ExperimentController  # noqa: E402
from models import ExperimentSpec, ReportStorage  # noqa: E402


# ===== FIXTURES =====

@pytest.fixture
def storage(tmp_path):
    """ReportStorage mit temporärem Verzeichnis

    ERKLÄRUNG:
    - tmp_path wird nach dem Test automatisch gelöscht
    - Jede Testfunktion bekommt ein eigenes Verzeichnis
    """
    return ReportStorage(str(tmp_path / "results"))


@pytest.fixture
def controller(storage):
    return ExperimentController(storage=storage)


def run_into(directory, **values):
    """Führe eine Spezifikation mit eigenem Storage in ``directory`` aus"""
    spec = ExperimentSpec(output_dir=directory, **values)
    return spec, ExperimentController().run(spec)


# ===== RASTER =====

class TestRasterIntegration:
    """Raster-Export mit echtem Storage"""

    def test_raster_file_has_meta_line_and_rows(self, controller, storage, tmp_path):
        # Arrange
        spec = ExperimentSpec(command="raster", dimension=2, depth=3, grid=9, output_dir=tmp_path)

        # Act
        result = controller.run(spec)
        lines = storage.path("raster.csv").read_text(encoding="utf-8").splitlines()

        # Assert
        assert result.status == EXIT_OK
        assert lines[0] == f"# config_digest={spec.digest()}; tool_version=1.0.0"
        assert lines[1] == "x1,x2,value"
        assert len(lines) == 2 + 81

    def test_raster_rerun_is_byte_identical(self, tmp_path):
        """Gleicher Seed → bitidentische Dateien in getrennten Verzeichnissen"""
        # Act
        run_into(tmp_path / "a", command="raster", dimension=2, depth=4, grid=17, seed=3)
        run_into(tmp_path / "b", command="raster", dimension=2, depth=4, grid=17, seed=3, threads=4)

        # Assert
        assert (tmp_path / "a" / "raster.csv").read_bytes() == (tmp_path / "b" / "raster.csv").read_bytes()

    def test_different_seed_changes_raster(self, tmp_path):
        run_into(tmp_path / "a", command="raster", depth=4, grid=33, seed=1)
        run_into(tmp_path / "b", command="raster", depth=4, grid=33, seed=2)
        assert (tmp_path / "a" / "raster.csv").read_bytes() != (tmp_path / "b" / "raster.csv").read_bytes()

    def test_nuclei_export(self, controller, storage, tmp_path):
        """nuclei.csv enthält Kerne aller Generationen"""
        # Arrange
        spec = ExperimentSpec(command="raster", depth=2, grid=4, export_nuclei=True, output_dir=tmp_path)

        # Act
        result = controller.run(spec)
        rows = storage.load_csv("nuclei.csv")

        # Assert
        assert storage.path("nuclei.csv") in result.files
        assert {row["generation"] for row in rows} == {"0", "1", "2"}

    def test_dyadic_nuclei_export_is_skipped(self, controller, storage, tmp_path):
        spec = ExperimentSpec(command="raster", family="dyadic", depth=2, grid=4, export_nuclei=True,
                              output_dir=tmp_path)
        result = controller.run(spec)
        assert not storage.path("nuclei.csv").exists()
        assert result.messages


# ===== ANALYSEN =====

class TestAnalysisIntegration:
    """Box-Dimension, Oszillationsprofil und Energie bis zur Datei"""

    def test_boxdim_writes_table_and_estimate(self, controller, storage, tmp_path):
        # Arrange
        spec = ExperimentSpec(command="boxdim", scales="2^-3..2^-8", allow_flagged=True, output_dir=tmp_path)

        # Act
        result = controller.run(spec)
        table = storage.load_csv("boxcount.csv")
        report = storage.load_json("dimension.json")

        # Assert
        assert result.status == EXIT_OK
        assert [float(row["tau"]) for row in table] == [2.0 ** -k for k in range(3, 9)]
        assert report["config_digest"] == spec.digest()
        assert report["scales_used"] == 4
        assert 1.0 < report["slope"] < 2.0
        assert report["ci"][0] <= report["slope"] <= report["ci"][1]

    def test_boxdim_with_too_few_scales_is_flagged(self, controller, storage, tmp_path):
        """Drei Skalen minus zwei grobe → InsufficientData → Status 1, keine dimension.json"""
        # Arrange
        spec = ExperimentSpec(command="boxdim", scales="2^-2..2^-4", depth=10, allow_flagged=True,
                              output_dir=tmp_path)

        # Act
        result = controller.run(spec)

        # Assert
        assert result.status == EXIT_FLAGGED
        assert storage.path("boxcount.csv").exists()
        assert not storage.path("dimension.json").exists()

    def test_hexagonal_oscillation_profile(self, controller, storage, tmp_path):
        """Sechseckmodell: Profil plus Zellschranken je Generation"""
        # Arrange
        spec = ExperimentSpec(command="oscillation", family="hexagonal", depth=8, scales="2^-3..2^-6",
                              cubes=8, allow_flagged=True, output_dir=tmp_path)

        # Act
        result = controller.run(spec)
        payload = storage.load_json("oscillation.json")

        # Assert
        assert result.status == EXIT_OK
        assert len(storage.load_csv("oscillation.csv")) == 4
        assert [b["N"] for b in payload["cell_bounds"]] == list(range(1, 9))
        assert all(b["pass"] for b in payload["cell_bounds"])
        assert payload["lower_constant"] <= payload["upper_constant"]

    def test_energy_rows_per_exponent(self, controller, storage, tmp_path):
        # Arrange
        spec = ExperimentSpec(command="energy", depth=10, energy_n=6, s_values=[1.2, 1.4], pairs=2000,
                              shells=3, output_dir=tmp_path)

        # Act
        result = controller.run(spec)
        rows = storage.load_csv("energy.csv")

        # Assert
        assert result.status == EXIT_OK
        assert [float(r["s"]) for r in rows] == [1.2, 1.4]
        assert all(float(r["estimate"]) > 0 for r in rows)
        assert all(r["shell_last"] == "2" for r in rows)


# ===== VERIFIKATION =====

class TestVerifySuiteIntegration:
    """verify_report.json mit kleinen Budgets"""

    SMALL = {"density_samples": 2000, "decay_trials": 500, "lipschitz_trials": 10_000, "scaling_trials": 1000}

    def test_report_structure(self, controller, storage, tmp_path):
        # Arrange
        spec = ExperimentSpec(command="verify-suite", budgets=self.SMALL, output_dir=tmp_path)

        # Act
        result = controller.run(spec)
        report = json.loads(storage.path("verify_report.json").read_text(encoding="utf-8"))

        # Assert
        names = [r["test"] for r in report["results"]]
        assert names == ["density_z1d", "oscillation_set_decay", "lipschitz_mean",
                         "lipschitz_conditioning", "scaling_invariance"]
        assert all(set(r) == {"test", "parameters", "statistic", "threshold", "pass", "details"}
                   for r in report["results"])
        assert (result.status == EXIT_OK) == report["all_passed"]

    def test_negative_control_fails_suite(self, controller, storage, tmp_path):
        """Falscher Skalierungsfaktor → Skalenprüfung fällt durch, Status 1"""
        # Arrange
        spec = ExperimentSpec(command="verify-suite", budgets=self.SMALL, negative_control=True,
                              output_dir=tmp_path)

        # Act
        result = controller.run(spec)
        report = storage.load_json("verify_report.json")

        # Assert
        scaling = [r for r in report["results"] if r["test"] == "scaling_invariance"][0]
        assert scaling["pass"] is False
        assert report["all_passed"] is False
        assert result.status == EXIT_FLAGGED

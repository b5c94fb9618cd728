"""Models - Konfiguration, Ergebnis-Datenstrukturen und Storage"""

import csv
import hashlib
import io
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, List, Dict, Any, Tuple, Sequence

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"
OUTPUT_DIR_ENV = "TAKAGI_OUTPUT_DIR"


# ===== FEHLER =====

class TakagiError(Exception):
    """Basisklasse aller Fehler des Projekts"""


class ParameterError(TakagiError, ValueError):
    """Ungültige Parameter (Intensität, Fenster, Skalen, ...)"""


class StateError(TakagiError):
    """Operation im aktuellen Zustand nicht möglich (z.B. leere Punktmenge)"""


class GeometryError(TakagiError):
    """Geometrische Abfrage nicht auflösbar"""


class UnboundedDirectionError(GeometryError):
    """Strahl verlässt das Fenster, ohne eine Mittelsenkrechte zu kreuzen"""


class UnboundedCellError(GeometryError):
    """Zelle ist innerhalb des Fensters nicht beschränkt"""


class EvaluationError(TakagiError):
    """Auswertung von Δ_n oder der Reihe fehlgeschlagen"""


class ContractError(TakagiError):
    """Vorbedingung einer Formel verletzt"""


class InsufficientDataError(TakagiError):
    """Zu wenige verwertbare Skalen oder Ziehungen"""


class DegenerateError(TakagiError):
    """Monte-Carlo-Akzeptanzrate zu klein"""


class StorageError(TakagiError):
    """Fehler beim Lesen oder Schreiben von Ergebnisdateien"""


# ===== ENUMS =====

class Family(str, Enum):
    """Modellfamilie des Feldes"""
    VORONOI = "voronoi"
    HEXAGONAL = "hexagonal"
    DYADIC = "dyadic"


class Command(str, Enum):
    """Experiment-Kommando der CLI"""
    RASTER = "raster"
    BOXDIM = "boxdim"
    OSCILLATION = "oscillation"
    ENERGY = "energy"
    VERIFY_SUITE = "verify-suite"


# ===== KONFIGURATION =====

def canonical_digest(payload: Dict[str, Any]) -> str:
    """Stabiler Hash (16 Hex-Zeichen) eines kanonisierten JSON-Dokuments"""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class Window(BaseModel):
    """Achsenparalleles Beobachtungsfenster mit Rand

    Die effektive Ziehungsregion ist das Fenster, auf jeder Seite
    um ``margin`` vergrößert.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    dimension: int = 1
    lower: Tuple[float, ...] = (0.0,)
    upper: Tuple[float, ...] = (1.0,)
    margin: float = 0.0

    @model_validator(mode="after")
    def _check_bounds(self) -> "Window":
        if self.dimension not in (1, 2):
            raise ValueError("Nur D=1 oder D=2 werden unterstützt")
        if len(self.lower) != self.dimension or len(self.upper) != self.dimension:
            raise ValueError("Fensterecken müssen D Koordinaten haben")
        for lo, hi in zip(self.lower, self.upper):
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
                raise ValueError("Obere Fensterecke muss größer als die untere sein")
        if not math.isfinite(self.margin) or self.margin < 0:
            raise ValueError("Rand muss endlich und >= 0 sein")
        return self

    @classmethod
    def unit(cls, dimension: int, margin: float = 0.0) -> "Window":
        """Einheitswürfel [0,1]^D"""
        return cls(dimension=dimension, lower=(0.0,) * dimension,
                   upper=(1.0,) * dimension, margin=margin)

    def inflated(self) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
        """Ecken der um den Rand vergrößerten Region"""
        lo = tuple(v - self.margin for v in self.lower)
        hi = tuple(v + self.margin for v in self.upper)
        return lo, hi

    def volume(self) -> float:
        """Volumen der vergrößerten Region"""
        lo, hi = self.inflated()
        return math.prod(h - l for l, h in zip(lo, hi))

    def with_margin(self, margin: float) -> "Window":
        return self.model_copy(update={"margin": float(margin)})

    def scaled(self, factor: float) -> "Window":
        """Fenster mit allen Längen multipliziert mit ``factor``"""
        return Window(
            dimension=self.dimension,
            lower=tuple(v * factor for v in self.lower),
            upper=tuple(v * factor for v in self.upper),
            margin=self.margin * factor,
        )


class FieldConfig(BaseModel):
    """Vollständige Beschreibung einer Feld-Realisierung

    Invarianten: λ>1, 0<α≤β≤1, H>β, D∈{1,2}; die hexagonale Familie
    verlangt D=2, λ=2 und β=1, die dyadische λ=2.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    family: Family = Family.VORONOI
    dimension: int = 1
    lam: float = 2.0
    alpha: float = 0.5
    beta: float = 1.0
    hurst: float = 1.5
    depth: int = Field(12, ge=0)
    window: Optional[Window] = None
    margin: Optional[float] = None
    seed: int = 0

    @model_validator(mode="before")
    @classmethod
    def _default_window(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("window") is None:
            data = dict(data)
            data["window"] = Window.unit(int(data.get("dimension", 1)))
        return data

    @model_validator(mode="after")
    def _check_invariants(self) -> "FieldConfig":
        if self.dimension not in (1, 2):
            raise ValueError("Nur D=1 oder D=2 werden unterstützt")
        if not self.lam > 1:
            raise ValueError("Lambda muss größer als 1 sein")
        if not (0 < self.alpha <= self.beta <= 1):
            raise ValueError("Es muss 0 < alpha <= beta <= 1 gelten")
        if not self.hurst > self.beta:
            raise ValueError("H muss größer als beta sein")
        if self.family == Family.HEXAGONAL:
            if self.dimension != 2 or self.lam != 2 or self.beta != 1:
                raise ValueError("Hexagonale Familie erfordert D=2, lambda=2 und beta=1")
        if self.family == Family.DYADIC and self.lam != 2:
            raise ValueError("Dyadische Familie erfordert lambda=2")
        if self.margin is not None and (not math.isfinite(self.margin) or self.margin < 0):
            raise ValueError("Rand muss endlich und >= 0 sein")
        if self.window is None or self.window.dimension != self.dimension:
            raise ValueError("Fensterdimension passt nicht zu D")
        if not 0 <= self.seed < 2**64:
            raise ValueError("Seed muss eine 64-Bit-Ganzzahl >= 0 sein")
        return self

    def intensity(self, n: int) -> float:
        """Intensität λ^{nβ} der Generation n (dyadisch: 2^{nD} Würfel pro Volumen)"""
        if self.family == Family.DYADIC:
            return 2.0 ** (n * self.dimension)
        return self.lam ** (n * self.beta)

    def amplitude(self, n: int) -> float:
        """Gewicht λ^{−nα/D} der Generation n (hexagonal: 2^{−nα}, dyadisch: 2^{−nα/β})"""
        if self.family == Family.HEXAGONAL:
            return 2.0 ** (-n * self.alpha)
        if self.family == Family.DYADIC:
            return 2.0 ** (-n * self.alpha / self.beta)
        return self.lam ** (-n * self.alpha / self.dimension)

    def cell_scale(self, n: int) -> float:
        """Zellgröße λ^{−nβ/D} der Generation n (hexagonal und dyadisch: 2^{−n})"""
        if self.family in (Family.HEXAGONAL, Family.DYADIC):
            return 2.0 ** (-n)
        return self.lam ** (-n * self.beta / self.dimension)

    def tau(self, n: int) -> float:
        """Skala τ_n = λ^{−nH/D}"""
        return self.lam ** (-n * self.hurst / self.dimension)

    def digest(self) -> str:
        return canonical_digest(self.model_dump(mode="json"))


class SamplingPlan(BaseModel):
    """Ziehungsplan für Oszillationen (k^D Gitterpunkte pro Würfel)"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    k_start: int = Field(2, ge=1)
    k_max: int = Field(64, ge=1)
    rel_tol: float = Field(0.01, gt=0)
    max_points: int = Field(2 ** 24, ge=1)

    @model_validator(mode="after")
    def _check_k(self) -> "SamplingPlan":
        if self.k_max < self.k_start:
            raise ValueError("k_max muss >= k_start sein")
        return self


class Budgets(BaseModel):
    """Vorab festgelegte Monte-Carlo-Budgets der Verifikation"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    density_samples: int = Field(100_000, ge=1)
    decay_trials: int = Field(10_000, ge=1)
    lipschitz_trials: int = Field(400_000, ge=1)
    scaling_trials: int = Field(10_000, ge=1)


def parse_scales(text: str) -> List[float]:
    """Parse Skalenliste: ``2^-4..2^-10`` oder ``0.1,0.05``

    Returns:
        Skalen in der angegebenen Reihenfolge
    """
    text = text.strip()
    match = re.fullmatch(r"2\^(-?\d+)\.\.2\^(-?\d+)", text)
    if match:
        a, b = int(match.group(1)), int(match.group(2))
        step = 1 if b >= a else -1
        return [2.0 ** e for e in range(a, b + step, step)]
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ValueError(f"Ungültige Skalenliste: {text}") from e


def _default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "results"))


class ExperimentSpec(BaseModel):
    """Experiment-Spezifikation der CLI (inkl. aller FieldConfig-Felder)"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    command: Command
    family: Family = Family.VORONOI
    dimension: int = 1
    lam: float = 2.0
    alpha: float = 0.5
    beta: float = 1.0
    hurst: float = 1.5
    depth: Optional[int] = None
    margin: Optional[float] = None
    seed: int = 0
    output_dir: Path = Field(default_factory=_default_output_dir)
    scales: List[float] = Field(default_factory=lambda: [2.0 ** -e for e in range(4, 11)])
    grid: int = Field(256, ge=2)
    cubes: int = Field(64, ge=1)
    s_values: List[float] = Field(default_factory=lambda: [1.2])
    energy_n: int = Field(6, ge=0)
    pairs: int = Field(20_000, ge=1)
    shells: Optional[int] = None
    budgets: Budgets = Field(default_factory=Budgets)
    sampling: SamplingPlan = Field(default_factory=SamplingPlan)
    export_nuclei: bool = False
    negative_control: bool = False
    allow_flagged: bool = False
    threads: int = Field(1, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _hexagonal_defaults(cls, data: Any) -> Any:
        # Sechseckmodell lebt nur in D=2
        if isinstance(data, dict) and data.get("family") in (Family.HEXAGONAL, "hexagonal"):
            data = {"dimension": 2, **data}
        return data

    @field_validator("scales", mode="before")
    @classmethod
    def _parse_scales(cls, value: Any) -> Any:
        if isinstance(value, str):
            return parse_scales(value)
        return value

    @field_validator("scales")
    @classmethod
    def _check_scales(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("Mindestens eine Skala erforderlich")
        if any(not (0 < tau < 1) for tau in value):
            raise ValueError("Skalen müssen in (0,1) liegen")
        return value

    @field_validator("s_values")
    @classmethod
    def _check_s(cls, value: List[float]) -> List[float]:
        if not value or any(s <= 1 for s in value):
            raise ValueError("Energie-Exponenten s müssen > 1 sein")
        return value

    @model_validator(mode="after")
    def _check_field(self) -> "ExperimentSpec":
        # Validierung vor jeder Ziehung
        config = self.field_config()
        if self.command == Command.ENERGY:
            if self.family != Family.VORONOI:
                raise ValueError("energy erfordert die Voronoi-Familie")
            if self.energy_n > config.depth:
                raise ValueError("energy_n darf die Tiefe nicht überschreiten")
        return self

    def field_config(self, depth: Optional[int] = None) -> FieldConfig:
        """Erzeuge die FieldConfig dieses Experiments"""
        values = dict(
            family=self.family, dimension=self.dimension, lam=self.lam,
            alpha=self.alpha, beta=self.beta, hurst=self.hurst,
            margin=self.margin, seed=self.seed,
        )
        chosen = depth if depth is not None else self.depth
        if chosen is not None:
            values["depth"] = chosen
        return FieldConfig(**values)

    def digest(self) -> str:
        payload = self.model_dump(mode="json", exclude={"output_dir", "threads", "allow_flagged"})
        return canonical_digest(payload)


# ===== ERGEBNIS-DATENSTRUKTUREN =====

@dataclass(frozen=True)
class BoxCount:
    """Ein Eintrag (τ, N(τ)) einer Box-Zählung"""
    tau: float
    n_boxes: int
    samples_per_cell: int
    flagged: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("τ muss > 0 sein")
        if self.n_boxes < 1:
            raise ValueError("N(τ) muss >= 1 sein")


@dataclass
class BoxCountReport:
    """Folge von Box-Zählungen, nach fallendem τ sortiert"""
    counts: List[BoxCount]
    window: Window
    config_digest: str = ""
    truncation_scale: float = 0.0
    non_monotone: List[float] = field(default_factory=list, init=False)

    def __post_init__(self):
        self.counts = sorted(self.counts, key=lambda c: -c.tau)
        taus = [c.tau for c in self.counts]
        if len(set(taus)) != len(taus):
            raise ValueError("τ-Werte müssen verschieden sein")
        for coarse, fine in zip(self.counts, self.counts[1:]):
            if fine.n_boxes < coarse.n_boxes:
                self.non_monotone.append(fine.tau)
                logger.warning("N(τ) fällt bei τ=%g (%d < %d)", fine.tau, fine.n_boxes, coarse.n_boxes)

    @property
    def taus(self) -> List[float]:
        return [c.tau for c in self.counts]

    @property
    def flagged(self) -> bool:
        """N(τ) fällt irgendwo mit kleinerem τ"""
        return bool(self.non_monotone)


@dataclass(frozen=True)
class DimensionEstimate:
    """Regressionsergebnis log N(τ) gegen log(1/τ)"""
    slope: float
    intercept: float
    residuals: Tuple[float, ...]
    half_width: float
    tau_range: Tuple[float, float]
    scales_used: int

    @property
    def ci(self) -> Tuple[float, float]:
        """95%-Konfidenzintervall der Steigung"""
        return (self.slope - self.half_width, self.slope + self.half_width)


@dataclass(frozen=True)
class EnergyEstimate:
    """Monte-Carlo-Schätzung der s-Energie auf W_N"""
    s: float
    estimate: float
    stderr: float
    pairs: int
    acceptance_rate: float
    n_start: int
    hurst: float
    shells: Tuple[int, int]
    min_distance: float

    def __post_init__(self):
        if not self.s > 1:
            raise ValueError("s muss > 1 sein")


@dataclass
class VerificationResult:
    """Ergebnis eines statistischen Tests für den JSON-Bericht"""
    name: str
    parameters: Dict[str, Any]
    statistic: float
    threshold: float
    passed: bool
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "test": self.name,
            "parameters": self.parameters,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "pass": bool(self.passed),
            "details": self.details,
        }


# ===== STORAGE =====

def _meta_line(config_digest: str) -> str:
    return f"# config_digest={config_digest}; tool_version={TOOL_VERSION}"


class ReportStorage:
    """CSV/JSON-Persistierung der Experiment-Ergebnisse"""

    def __init__(self, output_dir: str = "results"):
        """
        Initialisiere Storage mit Ausgabeverzeichnis

        Args:
            output_dir: Pfad zum Ausgabeverzeichnis
        """
        self.output_dir = Path(output_dir)
        self._create_output_directory()

    def _create_output_directory(self) -> None:
        """Erstelle Ausgabeverzeichnis"""
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            logger.error("Fehler beim Anlegen von %s: %s", self.output_dir, e)
            raise StorageError(f"Ausgabeverzeichnis nicht beschreibbar: {self.output_dir}") from e

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def save_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence[Any]],
                 config_digest: str) -> Path:
        """
        Speichere Tabelle als CSV mit Kopfzeile für Digest und Version

        Args:
            name: Dateiname
            header: Spaltennamen
            rows: Zeilen
            config_digest: Digest der Konfiguration

        Returns:
            Pfad der geschriebenen Datei
        """
        buffer = io.StringIO()
        buffer.write(_meta_line(config_digest) + "\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])
        return self._write(name, buffer.getvalue())

    def save_json(self, name: str, payload: Dict[str, Any], config_digest: str) -> Path:
        """
        Speichere Bericht als JSON (mit Digest und Version)

        Args:
            name: Dateiname
            payload: Inhalt
            config_digest: Digest der Konfiguration
        """
        document = dict(payload)
        document["config_digest"] = config_digest
        document["tool_version"] = TOOL_VERSION
        text = json.dumps(document, ensure_ascii=False, indent=2, sort_keys=True) + "\n"
        return self._write(name, text)

    def load_json(self, name: str) -> Dict[str, Any]:
        """Lade JSON-Bericht"""
        try:
            with open(self.path(name), "r", encoding="utf-8") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.error("Fehler beim Laden von %s: %s", name, e)
            raise StorageError(f"Bericht nicht lesbar: {name}") from e

    def load_csv(self, name: str) -> List[Dict[str, str]]:
        """Lade CSV-Tabelle (ohne Kommentarzeile) als Liste von Dicts"""
        try:
            with open(self.path(name), "r", encoding="utf-8") as f:
                lines = [line for line in f if not line.startswith("#")]
        except OSError as e:
            logger.error("Fehler beim Laden von %s: %s", name, e)
            raise StorageError(f"Tabelle nicht lesbar: {name}") from e
        return list(csv.DictReader(lines))

    def _write(self, name: str, text: str) -> Path:
        target = self.path(name)
        try:
            with open(target, "w", encoding="utf-8", newline="") as f:
                f.write(text)
        except OSError as e:
            logger.error("Fehler beim Speichern von %s: %s", target, e)
            raise StorageError(f"Datei nicht schreibbar: {target}") from e
        logger.debug("%s geschrieben", target)
        return target


def _format_cell(value: Any) -> str:
    """Deterministische Textform einer Zelle (repr für Gleitkommazahlen)"""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(float(value))
    if hasattr(value, "item"):
        return _format_cell(value.item())
    return str(value)

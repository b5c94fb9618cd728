"""Field - Schichtfunktionen Δ_n und die abgeschnittene Reihe F

F(x) = Σ_{n=0}^{N_max} λ^{−nα/D} Δ_n(x) für die drei Familien
Poisson-Voronoi, hexagonal und gestörtes dyadisches Gitter.
"""

import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from geometry import NO_INDEX, oscillation_set_membership, nearest_nucleus, resolve_many, secondary_nucleus
from models import (
    ContractError, EvaluationError, Family, FieldConfig, ParameterError, ReportStorage, Window,
)
from pointprocess import NucleusSet, default_margin, derive_seed, sample_generation


logger = logging.getLogger(__name__)

CLAMP_TOLERANCE = 1e-12
WINDOW_TOLERANCE = 1e-9
MAX_NUCLEI = 2_000_000

SQRT3 = math.sqrt(3.0)
# Sechseck um 0 mit Ecke (1,0): Nachbarzentren im Abstand √3 unter 30°+60°k
HEX_BASIS = np.array([[1.5, SQRT3 / 2.0], [0.0, SQRT3]])
HEX_APOTHEM = SQRT3 / 2.0
HEX_NORMALS = np.array([[math.cos(math.radians(30 + 60 * k)), math.sin(math.radians(30 + 60 * k))]
                        for k in range(6)])
HEX_CELL_AREA = 1.5 * SQRT3


# ===== HILFSFUNKTIONEN =====

def _clamp_unit(values: np.ndarray, context: str) -> np.ndarray:
    """Schneide auf [0,1]; Überschreitung > CLAMP_TOLERANCE ist ein Fehler"""
    excess = np.maximum(values - 1.0, -values)
    worst = float(excess.max()) if excess.size else 0.0
    if worst > CLAMP_TOLERANCE:
        raise EvaluationError(f"Δ außerhalb [0,1] um {worst:.3e} ({context})")
    return np.clip(values, 0.0, 1.0)


def _points(xs, dimension: int) -> np.ndarray:
    return np.asarray(xs, dtype=float).reshape(-1, dimension)


def increment_closed_form(c, c2, x, y, amplitude: float = 1.0) -> Union[float, np.ndarray]:
    """Z = −2·amplitude·⟨x−y, c′−c⟩/‖c′−c‖² (Zuwachs auf einem Simplex)

    Arbeitet zeilenweise auf Arrays der Form (..., D).
    """
    d = np.asarray(c2, dtype=float) - np.asarray(c, dtype=float)
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    z = -2.0 * amplitude * np.sum(diff * d, axis=-1) / np.sum(d * d, axis=-1)
    return float(z) if np.ndim(z) == 0 else z


# ===== HEXAGONALES GITTER =====

def hexagonal_delta0(xs: np.ndarray) -> np.ndarray:
    """Pyramidenfunktion Δ_0 des Einheits-Sechseckgitters (geschlossene Form)"""
    xs = _points(xs, 2)
    q = xs[:, 0] / HEX_BASIS[0, 0]
    r = xs[:, 1] / HEX_BASIS[1, 1] - 0.5 * q
    # Würfelkoordinaten q+r+s=0; Rundung liefert das nächste Zentrum
    s = -q - r
    rq, rr, rs = np.rint(q), np.rint(r), np.rint(s)
    dq, dr, ds = np.abs(rq - q), np.abs(rr - r), np.abs(rs - s)
    fix_q = (dq > dr) & (dq > ds)
    fix_r = ~fix_q & (dr > ds)
    rq = np.where(fix_q, -rr - rs, rq)
    rr = np.where(fix_r, -rq - rs, rr)
    rel = xs - np.outer(rq, HEX_BASIS[0]) - np.outer(rr, HEX_BASIS[1])
    support = (rel @ HEX_NORMALS.T).max(axis=1)
    return _clamp_unit(1.0 - support / HEX_APOTHEM, "hexagonal")


def hexagonal_nuclei(n: int, window: Window) -> NucleusSet:
    """Zentren 2^{−n}·X_0 der Generation n als NucleusSet"""
    if n < 0:
        raise ParameterError("Generation muss >= 0 sein")
    scale = 2.0 ** (-n)
    intensity = 1.0 / (HEX_CELL_AREA * scale * scale)
    if window.margin == 0:
        window = window.with_margin(default_margin(intensity, 2))
    lo, hi = (np.asarray(v) for v in window.inflated())
    step_a = HEX_BASIS[0, 0] * scale
    step_b = HEX_BASIS[1, 1] * scale
    i = np.arange(math.floor(lo[0] / step_a), math.ceil(hi[0] / step_a) + 1)
    shift = i * HEX_BASIS[0, 1] * scale
    j = np.arange(math.floor((lo[1] - shift.max()) / step_b), math.ceil((hi[1] - shift.min()) / step_b) + 1)
    ii, jj = np.meshgrid(i, j, indexing="ij")
    points = (np.outer(ii.ravel(), HEX_BASIS[0]) + np.outer(jj.ravel(), HEX_BASIS[1])) * scale
    inside = np.all((points >= lo) & (points <= hi), axis=1)
    return NucleusSet(generation=n, intensity=intensity, points=points[inside], seed=0, window=window)


# ===== DYADISCHE SCHLÜSSEL =====

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def keyed_uniforms(key: int, cells: np.ndarray) -> np.ndarray:
    """Reine Funktion (key, Würfelindex) → gleichverteilte Werte in (0,1)^D"""
    cells = np.atleast_2d(np.asarray(cells, dtype=np.int64))
    h = np.full(len(cells), np.uint64(key % 2 ** 64), dtype=np.uint64)
    for i in range(cells.shape[1]):
        h = _splitmix64(h ^ np.ascontiguousarray(cells[:, i]).view(np.uint64))
    out = np.empty(cells.shape, dtype=float)
    for i in range(cells.shape[1]):
        bits = _splitmix64(h ^ np.uint64(i + 1)) >> np.uint64(11)
        out[:, i] = (bits.astype(float) + 0.5) * 2.0 ** -53
    return out


# ===== SCHICHTEN =====

class VoronoiLayer:
    """Generation n der Poisson-Voronoi-Familie"""

    def __init__(self, nuclei: NucleusSet, amplitude: float):
        self.generation = nuclei.generation
        self.nuclei = nuclei
        self.amplitude = amplitude

    def delta(self, xs: np.ndarray) -> np.ndarray:
        xs = _points(xs, self.nuclei.dimension)
        c_idx, s_idx, at_nucleus = resolve_many(self.nuclei, xs)
        unbounded = (~at_nucleus) & (s_idx == NO_INDEX)
        if np.any(unbounded):
            logger.warning("Generation %d: %d Punkte ohne Sekundärkern", self.generation, int(unbounded.sum()))
            raise EvaluationError(f"Unbeschränkte Richtung in Generation {self.generation}")
        values = np.ones(len(xs))
        off = ~at_nucleus
        c = self.nuclei.points[c_idx[off]]
        d = self.nuclei.points[s_idx[off]] - c
        values[off] = 1.0 - 2.0 * np.einsum("qd,qd->q", xs[off] - c, d) / np.einsum("qd,qd->q", d, d)
        return _clamp_unit(values, f"voronoi n={self.generation}")


class HexagonalLayer:
    """Generation n des Sechseckmodells: Δ_n(x) = Δ_0(2^n x)"""

    def __init__(self, generation: int, window: Window, amplitude: float):
        self.generation = generation
        self.window = window
        self.amplitude = amplitude
        self._nuclei: Optional[NucleusSet] = None
        self._lock = threading.Lock()

    @property
    def nuclei(self) -> NucleusSet:
        """Gitterpunkte als NucleusSet (erst bei Bedarf erzeugt)"""
        with self._lock:
            if self._nuclei is None:
                self._nuclei = hexagonal_nuclei(self.generation, self.window)
            return self._nuclei

    def delta(self, xs: np.ndarray) -> np.ndarray:
        return hexagonal_delta0(_points(xs, 2) * 2.0 ** self.generation)


@dataclass(frozen=True, eq=False)
class DyadicLayer:
    """Verschobenes Würfelgitter der Generation n mit einem Kern pro Würfel

    Würfelseite 2^{−n}, Verschiebung gleichverteilt in seite·(0,1)^D,
    Kern von Würfel k als reine Funktion von (key, k).
    """

    generation: int
    side: float
    shift: np.ndarray
    key: int
    amplitude: float

    def cube_index(self, xs: np.ndarray) -> np.ndarray:
        return np.floor((xs - self.shift) / self.side).astype(np.int64)

    def cube_corner(self, cells: np.ndarray) -> np.ndarray:
        return self.shift + cells * self.side

    def nucleus(self, cells: np.ndarray) -> np.ndarray:
        """Kerne der Würfel ``cells`` (im offenen Würfel)"""
        cells = np.atleast_2d(cells)
        return self.cube_corner(cells) + self.side * keyed_uniforms(self.key, cells)

    def delta(self, xs: np.ndarray) -> np.ndarray:
        xs = _points(xs, len(self.shift))
        cells = self.cube_index(xs)
        corner = self.cube_corner(cells)
        c = corner + self.side * keyed_uniforms(self.key, cells)
        v = xs - c
        # Kegel über den Würfelflächen: linear von 1 im Kern auf 0 am Rand
        ratio = np.maximum(v, 0.0) / (corner + self.side - c) + np.maximum(-v, 0.0) / (c - corner)
        return _clamp_unit(1.0 - ratio.max(axis=1), f"dyadic n={self.generation}")


Layer = Union[VoronoiLayer, HexagonalLayer, DyadicLayer]


def build_dyadic_layer(config: FieldConfig, n: int) -> DyadicLayer:
    side = config.cell_scale(n)
    rng = np.random.default_rng(derive_seed(config.seed, "dyadic-shift", n))
    shift = side * rng.random(config.dimension)
    shift.setflags(write=False)
    return DyadicLayer(generation=n, side=side, shift=shift, key=derive_seed(config.seed, "dyadic", n),
                       amplitude=config.amplitude(n))


# ===== REALISIERUNG =====

def truncation_bound(config: FieldConfig) -> float:
    """Schranke λ^{−(N_max+1)α/D}/(1−λ^{−α/D}) für den abgeschnittenen Rest"""
    return config.amplitude(config.depth + 1) / (1.0 - config.amplitude(1))


def truncation_scale(config: FieldConfig, depth: Optional[int] = None) -> float:
    """Zellgröße der feinsten Generation"""
    return config.cell_scale(config.depth if depth is None else depth)


def depth_for_scale(config: FieldConfig, tau_min: float, safety: float = 8.0) -> int:
    """Kleinste Tiefe, deren Abschneideskala mindestens ``safety``-mal unter tau_min liegt"""
    if not 0 < tau_min < 1:
        raise ParameterError("tau_min muss in (0,1) liegen")
    depth = 0
    while truncation_scale(config, depth) * safety > tau_min:
        depth += 1
    return depth


def default_depth(config: FieldConfig, tau_min: float, tail_ratio: float = 0.125,
                  max_nuclei: float = MAX_NUCLEI) -> int:
    """Tiefe für eine Analyse bis tau_min

    Mindestens :func:`depth_for_scale`; danach weiter, bis das Gewicht der
    letzten Generation unter ``tail_ratio`` mal dem Gewicht bei tau_min
    liegt. Für die Voronoi-Familie begrenzt ``max_nuclei`` die Kernzahl
    der feinsten Generation.
    """
    depth = depth_for_scale(config, tau_min)
    at_scale = next(n for n in range(depth + 1) if config.cell_scale(n) <= tau_min)
    volume = config.window.volume()
    while config.amplitude(depth) > tail_ratio * config.amplitude(at_scale):
        if config.family == Family.VORONOI and config.intensity(depth + 1) * volume > max_nuclei:
            logger.warning("Tiefe bei %d begrenzt (Kernbudget %g)", depth, max_nuclei)
            break
        depth += 1
    return depth


@dataclass(frozen=True, eq=False)
class FieldRealization:
    """Unveränderliche Realisierung (config + Schichten 0..N_max)"""

    config: FieldConfig
    layers: Tuple[Layer, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.layers) != self.config.depth + 1:
            raise ParameterError("Es müssen genau die Generationen 0..N_max vorhanden sein")

    @classmethod
    def build(cls, config: FieldConfig, workers: int = 1) -> "FieldRealization":
        """
        Erzeuge alle Schichten deterministisch aus der Konfiguration

        Args:
            config: Feldkonfiguration
            workers: Threads für das Ziehen der Voronoi-Generationen

        Returns:
            FieldRealization
        """
        generations = range(config.depth + 1)
        if config.family == Family.VORONOI:
            with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
                sets = list(pool.map(lambda n: sample_generation(config, n), generations))
            layers = tuple(VoronoiLayer(s, config.amplitude(s.generation)) for s in sets)
        elif config.family == Family.HEXAGONAL:
            layers = tuple(HexagonalLayer(n, config.window, config.amplitude(n)) for n in generations)
        else:
            layers = tuple(build_dyadic_layer(config, n) for n in generations)
        logger.info("Realisierung %s gebaut: Familie %s, D=%d, N_max=%d",
                    config.digest(), config.family.value, config.dimension, config.depth)
        return cls(config=config, layers=layers)

    @classmethod
    def from_nuclei(cls, config: FieldConfig, sets: Sequence[NucleusSet]) -> "FieldRealization":
        """Realisierung aus vorgegebenen Kernmengen (Voronoi-Familie)"""
        if config.family != Family.VORONOI:
            raise ParameterError("Vorgegebene Kerne nur für die Voronoi-Familie")
        return cls(config=config, layers=tuple(VoronoiLayer(s, config.amplitude(n)) for n, s in enumerate(sets)))

    @property
    def dimension(self) -> int:
        return self.config.dimension

    @property
    def window(self) -> Window:
        return self.config.window

    @property
    def truncation_bound(self) -> float:
        return truncation_bound(self.config)

    @property
    def truncation_scale(self) -> float:
        return truncation_scale(self.config)

    def layer(self, n: int) -> Layer:
        if not 0 <= n <= self.config.depth:
            raise ParameterError(f"Generation {n} außerhalb 0..{self.config.depth}")
        return self.layers[n]

    def nuclei(self, n: int) -> NucleusSet:
        layer = self.layer(n)
        if isinstance(layer, DyadicLayer):
            raise ParameterError("Die dyadische Familie hat keine Voronoi-Kerne")
        return layer.nuclei

    def check_window(self, xs: np.ndarray) -> None:
        lo = np.asarray(self.window.lower) - WINDOW_TOLERANCE
        hi = np.asarray(self.window.upper) + WINDOW_TOLERANCE
        if xs.size and (np.any(xs < lo) or np.any(xs > hi)):
            raise ParameterError("Auswertungspunkt außerhalb des Fensters")

    def delta_many(self, n: int, xs) -> np.ndarray:
        """Δ_n für viele Punkte"""
        xs = _points(xs, self.dimension)
        self.check_window(xs)
        return self.layer(n).delta(xs)

    def values(self, xs) -> np.ndarray:
        """Abgeschnittene Reihe für viele Punkte (Summation in fester Reihenfolge)"""
        xs = _points(xs, self.dimension)
        self.check_window(xs)
        total = np.zeros(len(xs))
        for layer in self.layers:
            total += layer.amplitude * layer.delta(xs)
        return total


# ===== OPERATIONEN =====

def delta_eval(real: FieldRealization, n: int, x) -> float:
    """Δ_n(x) ∈ [0,1]"""
    return float(real.delta_many(n, x)[0])


def series_eval(real: FieldRealization, x) -> Tuple[float, float]:
    """
    Abgeschnittene Reihe an x

    Returns:
        (Σ_{n≤N_max} λ^{−nα/D}Δ_n(x), Schranke für den Rest)
    """
    return float(real.values(x)[0]), real.truncation_bound


def dyadic_layer(real: FieldRealization, n: int) -> DyadicLayer:
    """Beschreibung der dyadischen Schicht n"""
    if real.config.family != Family.DYADIC:
        raise ParameterError("dyadic_layer erfordert die dyadische Familie")
    return real.layer(n)


def increment_Zn(real: FieldRealization, n: int, x, y) -> float:
    """
    Zuwachs Z_n(x,y) = −2λ^{−nα/D}⟨x−y, c′−c⟩/‖c′−c‖²

    Vorbedingung: x ∈ O_{n,n} (Kugel mit Radius τ_n im Simplex von x)
    und ‖x−y‖ ≤ τ_n. Verletzung → ContractError.
    """
    dim = real.dimension
    x = np.asarray(x, dtype=float).reshape(dim)
    y = np.asarray(y, dtype=float).reshape(dim)
    distance = float(np.linalg.norm(x - y))
    if distance == 0:
        return 0.0
    tau = real.config.tau(n)
    if distance > tau * (1.0 + 1e-12):
        raise ContractError(f"‖x−y‖={distance:.3e} überschreitet τ_{n}={tau:.3e}")
    nuclei = real.nuclei(n)
    if not oscillation_set_membership(nuclei, x, tau):
        raise ContractError(f"x liegt nicht in O_{{{n},{n}}}")
    c_index, _ = nearest_nucleus(nuclei, x)
    s_index = secondary_nucleus(nuclei, c_index, x)
    return increment_closed_form(nuclei.points[c_index], nuclei.points[s_index], x, y, real.layer(n).amplitude)


def remainder_Sn(real: FieldRealization, n: int, x, y) -> float:
    """S_n(x,y) = Σ_{k≠n} λ^{−kα/D}(Δ_k(x)−Δ_k(y))"""
    pts = np.vstack([np.asarray(x, dtype=float).reshape(1, -1), np.asarray(y, dtype=float).reshape(1, -1)])
    real.check_window(pts)
    terms = []
    for layer in real.layers:
        if layer.generation == n:
            continue
        dx, dy = layer.delta(pts)
        terms.append(layer.amplitude * (dx - dy))
    return math.fsum(terms)


# ===== EXPORT =====

def raster_points(window: Window, grid: int) -> np.ndarray:
    """Reguläres Gitter (x2 außen, x1 innen) über dem Fenster"""
    axes = [np.linspace(lo, hi, grid) for lo, hi in zip(window.lower, window.upper)]
    if len(axes) == 1:
        return axes[0].reshape(-1, 1)
    x1, x2 = np.meshgrid(axes[0], axes[1], indexing="xy")
    return np.column_stack([x1.ravel(), x2.ravel()])


def export_raster(real: FieldRealization, grid: int, storage: ReportStorage, config_digest: str,
                  name: str = "raster.csv") -> List[List[float]]:
    """Schreibe F auf einem grid^D-Raster als CSV (x1[,x2],value)"""
    if grid < 2:
        raise ParameterError("Raster braucht mindestens 2 Punkte pro Achse")
    pts = raster_points(real.window, grid)
    values = real.values(pts)
    header = [f"x{i + 1}" for i in range(real.dimension)] + ["value"]
    rows = [[float(v) for v in p] + [float(val)] for p, val in zip(pts, values)]
    storage.save_csv(name, header, rows, config_digest)
    logger.info("Raster mit %d Punkten exportiert", len(rows))
    return rows

"""Fractal - Oszillationen, Box-Zählung, Dimensionsschätzung und s-Energie"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from field import FieldRealization, hexagonal_nuclei
from geometry import clearance_many
from models import (
    BoxCount, BoxCountReport, DegenerateError, DimensionEstimate, EnergyEstimate, Family,
    InsufficientDataError, ParameterError, SamplingPlan, Window,
)
from pointprocess import derive_seed


logger = logging.getLogger(__name__)

TRUNCATION_SAFETY = 8.0
COARSE_SCALES_DROPPED = 2
STRIP_POINTS = 1 << 20
MIN_ACCEPTANCE = 1e-3


# ===== OBERFLÄCHEN =====

class Surface(Protocol):
    """Alles, was sich punktweise auswerten lässt (Realisierung oder Testfunktion)"""

    dimension: int
    window: Window
    truncation_scale: float

    def values(self, xs) -> np.ndarray:
        ...


@dataclass
class FunctionSurface:
    """Oberfläche aus einer vektorisierten Funktion (z.B. konstant oder affin)"""

    func: Callable[[np.ndarray], np.ndarray]
    dimension: int = 1
    window: Optional[Window] = None
    truncation_scale: float = 0.0

    def __post_init__(self):
        if self.window is None:
            self.window = Window.unit(self.dimension)

    def values(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float).reshape(-1, self.dimension)
        return np.broadcast_to(np.asarray(self.func(xs), dtype=float), (len(xs),)).copy()


@dataclass
class ShiftedSurface:
    """Oberfläche plus feste Funktion g (Lipschitz-Störung)"""

    base: Surface
    shift: Callable[[np.ndarray], np.ndarray]

    @property
    def dimension(self) -> int:
        return self.base.dimension

    @property
    def window(self) -> Window:
        return self.base.window

    @property
    def truncation_scale(self) -> float:
        return self.base.truncation_scale

    def values(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float).reshape(-1, self.dimension)
        return self.base.values(xs) + np.asarray(self.shift(xs), dtype=float)


# ===== OSZILLATION =====

@dataclass(frozen=True)
class OscillationEstimate:
    """max−min über einem Würfel (untere Schranke der wahren Oszillation)"""
    value: float
    samples_per_cell: int
    flagged: bool

    def __float__(self) -> float:
        return self.value


def _stable(previous: Optional[float], current: float, rel_tol: float) -> bool:
    return previous is not None and abs(current - previous) <= rel_tol * abs(current)


def _cubes_osc(surface: Surface, corners: np.ndarray, tau: float, k: int) -> np.ndarray:
    """Oszillation auf (k+1)^D Gitterpunkten je Würfel corner+[0,τ]^D"""
    dim = surface.dimension
    axes = [np.linspace(0.0, tau, k + 1)] * dim
    offsets = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    upper = np.asarray(surface.window.upper)
    per_chunk = max(1, STRIP_POINTS // len(offsets))
    out = np.empty(len(corners))
    for start in range(0, len(corners), per_chunk):
        block = corners[start:start + per_chunk]
        pts = np.minimum(block[:, None, :] + offsets[None, :, :], upper).reshape(-1, dim)
        vals = surface.values(pts).reshape(len(block), -1)
        out[start:start + per_chunk] = vals.max(axis=1) - vals.min(axis=1)
    return out


def _refine_cubes(surface: Surface, corners: np.ndarray, tau: float,
                  plan: SamplingPlan) -> Tuple[np.ndarray, int, bool]:
    """Verdopple k, bis die Summe der Oszillationen stabil ist"""
    dim = surface.dimension
    k = plan.k_start
    previous = None
    while True:
        osc = _cubes_osc(surface, corners, tau, k)
        total = math.fsum(osc)
        if _stable(previous, total, plan.rel_tol):
            return osc, k, False
        if 2 * k > plan.k_max or len(corners) * (2 * k) ** dim > plan.max_points:
            return osc, k, True
        previous = total
        k *= 2


def oscillation(surface: Surface, cube_corner, tau: float, plan: Optional[SamplingPlan] = None) -> OscillationEstimate:
    """
    Oszillation von F über cube_corner+[0,τ]^D

    Args:
        surface: Realisierung oder Testfunktion
        cube_corner: untere Ecke des Würfels
        tau: Kantenlänge
        plan: Ziehungsplan

    Returns:
        OscillationEstimate (flagged, wenn das Budget vor Stabilisierung endet)
    """
    plan = plan or SamplingPlan()
    if not tau > 0:
        raise ParameterError("τ muss > 0 sein")
    corner = np.asarray(cube_corner, dtype=float).reshape(1, surface.dimension)
    osc, k, flagged = _refine_cubes(surface, corner, tau, plan)
    return OscillationEstimate(float(osc[0]), (k + 1) ** surface.dimension, flagged)


# ===== BOX-ZÄHLUNG =====

def _cell_counts(window: Window, tau: float) -> List[int]:
    return [max(1, int(math.ceil((hi - lo) / tau - 1e-9))) for lo, hi in zip(window.lower, window.upper)]


def _scale_osc(surface: Surface, tau: float, k: int) -> np.ndarray:
    """Oszillation aller Basiszellen einer Skala auf einem gemeinsamen Gitter"""
    window = surface.window
    cells = _cell_counts(window, tau)
    h = tau / k
    coords = [np.minimum(lo + np.arange(m * k + 1) * h, hi)
              for lo, hi, m in zip(window.lower, window.upper, cells)]
    if surface.dimension == 1:
        v = surface.values(coords[0].reshape(-1, 1))
        windows = sliding_window_view(v, k + 1)[::k]
        return windows.max(axis=1) - windows.min(axis=1)

    x1, x2 = coords
    rows_per_strip = max(1, STRIP_POINTS // (len(x1) * k))
    strips = []
    for r0 in range(0, cells[1], rows_per_strip):
        r1 = min(cells[1], r0 + rows_per_strip)
        ys = x2[r0 * k:r1 * k + 1]
        gx, gy = np.meshgrid(x1, ys, indexing="xy")
        v = surface.values(np.column_stack([gx.ravel(), gy.ravel()])).reshape(len(ys), len(x1))
        windows = sliding_window_view(v, (k + 1, k + 1))[::k, ::k]
        strips.append(windows.max(axis=(2, 3)) - windows.min(axis=(2, 3)))
    return np.vstack(strips)


def box_count(surface: Surface, tau: float, plan: Optional[SamplingPlan] = None) -> BoxCount:
    """
    N(τ) = Σ über die Basiszellen von (⌊osc/τ⌋ + 2)

    Args:
        surface: Realisierung oder Testfunktion
        tau: Maschenweite in (0,1)
        plan: Ziehungsplan

    Returns:
        BoxCount (flagged, wenn die Summe der Oszillationen nicht stabil wurde)
    """
    plan = plan or SamplingPlan()
    if not 0 < tau < 1:
        raise ParameterError(f"τ muss in (0,1) liegen: {tau}")
    floor = TRUNCATION_SAFETY * surface.truncation_scale
    if tau < floor:
        raise ParameterError(f"τ={tau:g} liegt unter der Abschneidegrenze {floor:g}")
    dim = surface.dimension
    n_cells = math.prod(_cell_counts(surface.window, tau))
    k = plan.k_start
    previous = None
    while True:
        osc = _scale_osc(surface, tau, k)
        total = math.fsum(osc.ravel())
        flagged = n_cells * (2 * k) ** dim > plan.max_points or 2 * k > plan.k_max
        if _stable(previous, total, plan.rel_tol):
            flagged = False
            break
        if flagged:
            logger.warning("τ=%g: Oszillation bei k=%d nicht stabil", tau, k)
            break
        previous = total
        k *= 2
    n_boxes = int(np.sum(np.floor(osc / tau))) + 2 * osc.size
    logger.debug("τ=%g: N=%d (k=%d)", tau, n_boxes, k)
    return BoxCount(tau=tau, n_boxes=n_boxes, samples_per_cell=(k + 1) ** dim, flagged=flagged)


def box_count_report(surface: Surface, taus: Sequence[float], plan: Optional[SamplingPlan] = None,
                     workers: int = 1, config_digest: str = "") -> BoxCountReport:
    """Box-Zählung für mehrere Skalen (Ergebnis unabhängig von ``workers``)"""
    plan = plan or SamplingPlan()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        counts = list(pool.map(lambda tau: box_count(surface, tau, plan), sorted(set(taus), reverse=True)))
    return BoxCountReport(counts=counts, window=surface.window, config_digest=config_digest,
                          truncation_scale=surface.truncation_scale)


# ===== REGRESSION =====

def estimate_dimension(report: BoxCountReport, include_flagged: bool = False) -> DimensionEstimate:
    """
    Kleinste Quadrate für log N(τ) gegen log(1/τ)

    Verworfen werden die zwei gröbsten Skalen, markierte Skalen (außer
    mit ``include_flagged``) und Skalen unter 8× der Abschneideskala.

    Returns:
        DimensionEstimate mit 95%-Halbbreite (Student-t)
    """
    floor = TRUNCATION_SAFETY * report.truncation_scale
    usable = [c for c in report.counts[COARSE_SCALES_DROPPED:]
              if (include_flagged or not c.flagged) and c.tau >= floor]
    if len(usable) < 3:
        raise InsufficientDataError(f"Nur {len(usable)} verwertbare Skalen (mindestens 3)")
    x = np.log([1.0 / c.tau for c in usable])
    y = np.log([float(c.n_boxes) for c in usable])
    fit = stats.linregress(x, y)
    residuals = y - (fit.intercept + fit.slope * x)
    half_width = float(stats.t.ppf(0.975, len(usable) - 2) * fit.stderr)
    dimension = report.window.dimension
    if not 0 <= fit.slope <= dimension + 1:
        logger.warning("Steigung %.3f außerhalb [0, %d]", fit.slope, dimension + 1)
    return DimensionEstimate(
        slope=float(fit.slope), intercept=float(fit.intercept),
        residuals=tuple(float(r) for r in residuals), half_width=half_width,
        tau_range=(min(c.tau for c in usable), max(c.tau for c in usable)),
        scales_used=len(usable),
    )


# ===== OSZILLATIONSPROFIL =====

@dataclass
class OscillationProfile:
    """Oszillationen zufälliger Würfel je Skala"""
    taus: List[float]
    mean: List[float]
    minimum: List[float]
    maximum: List[float]
    flagged: List[bool]
    slope: float
    alpha: Optional[float] = None
    lower_constant: Optional[float] = None
    upper_constant: Optional[float] = None

    def rows(self) -> List[List[float]]:
        return [[t, m, lo, hi, f] for t, m, lo, hi, f in
                zip(self.taus, self.mean, self.minimum, self.maximum, self.flagged)]


def oscillation_profile(surface: Surface, taus: Sequence[float], cubes: int, seed: int,
                        plan: Optional[SamplingPlan] = None, alpha: Optional[float] = None) -> OscillationProfile:
    """
    Mittlere, minimale und maximale Oszillation über ``cubes`` zufällige Würfel pro Skala

    Mit ``alpha`` werden die Klammerkonstanten C′ = min osc/τ^α und
    C = max osc/τ^α über alle Skalen berechnet.
    """
    plan = plan or SamplingPlan()
    if cubes < 1 or len(taus) < 2:
        raise ParameterError("Mindestens ein Würfel und zwei Skalen erforderlich")
    lo = np.asarray(surface.window.lower)
    hi = np.asarray(surface.window.upper)
    taus = sorted(taus, reverse=True)
    mean, minimum, maximum, flagged = [], [], [], []
    for i, tau in enumerate(taus):
        rng = np.random.default_rng(derive_seed(seed, "profile", i))
        corners = lo + (hi - tau - lo) * rng.random((cubes, surface.dimension))
        osc, _, flag = _refine_cubes(surface, corners, tau, plan)
        mean.append(math.fsum(osc) / cubes)
        minimum.append(float(osc.min()))
        maximum.append(float(osc.max()))
        flagged.append(flag)
    fit = stats.linregress(np.log(taus), np.log(mean))
    profile = OscillationProfile(taus=list(taus), mean=mean, minimum=minimum, maximum=maximum,
                                 flagged=flagged, slope=float(fit.slope), alpha=alpha)
    if alpha is not None:
        scaled = [(m_lo / t ** alpha, m_hi / t ** alpha) for t, m_lo, m_hi in zip(taus, minimum, maximum)]
        profile.lower_constant = min(s[0] for s in scaled)
        profile.upper_constant = max(s[1] for s in scaled)
    return profile


# ===== HEXAGONALE ZELLSCHRANKE =====

@dataclass(frozen=True)
class HexCellBound:
    """F(c) − min F(Ecken) über allen Sechsecken der Generation N im Fenster"""
    generation: int
    cells: int
    min_oscillation: float
    bound: float
    truncation_bound: float

    @property
    def passed(self) -> bool:
        return self.min_oscillation + self.truncation_bound >= self.bound - 1e-12


def hexagonal_cell_bound(real: FieldRealization, generation: int) -> HexCellBound:
    """
    Prüfe osc ≥ (1−2^{−α})^{−1}·2^{−Nα} für jede Zelle der Generation N

    Für n ≥ N ist Δ_n = 1 im Zentrum und 0 in den Ecken; die abgeschnittene
    Reihe erreicht die Schranke bis auf ihre Restschranke.
    """
    config = real.config
    if config.family != Family.HEXAGONAL:
        raise ParameterError("Zellschranke nur für die hexagonale Familie")
    if not 0 <= generation <= config.depth:
        raise ParameterError(f"Generation {generation} außerhalb 0..{config.depth}")
    scale = 2.0 ** (-generation)
    angles = np.radians(60.0 * np.arange(6))
    corners = scale * np.column_stack([np.cos(angles), np.sin(angles)])
    lo = np.asarray(real.window.lower)
    hi = np.asarray(real.window.upper)
    centers = hexagonal_nuclei(generation, real.window).points
    vertices = centers[:, None, :] + corners[None, :, :]
    inside = np.all((vertices >= lo) & (vertices <= hi), axis=(1, 2))
    centers, vertices = centers[inside], vertices[inside]
    if not len(centers):
        raise InsufficientDataError(f"Keine Zelle der Generation {generation} liegt im Fenster")
    at_centers = real.values(centers)
    at_vertices = real.values(vertices.reshape(-1, 2)).reshape(len(centers), 6)
    osc = at_centers - at_vertices.min(axis=1)
    bound = 2.0 ** (-generation * config.alpha) / (1.0 - 2.0 ** (-config.alpha))
    return HexCellBound(generation=generation, cells=len(centers), min_oscillation=float(osc.min()),
                        bound=bound, truncation_bound=real.truncation_bound)


# ===== s-ENERGIE =====

def in_oscillation_sets(real: FieldRealization, xs: np.ndarray, n_start: int) -> np.ndarray:
    """Mitgliedschaft in W_N = ∩_{n=N}^{N_max} O_{n,n} für viele Punkte"""
    xs = np.asarray(xs, dtype=float).reshape(-1, real.dimension)
    member = np.ones(len(xs), dtype=bool)
    for n in range(n_start, real.config.depth + 1):
        if not member.any():
            break
        idx = np.flatnonzero(member)
        member[idx] = clearance_many(real.nuclei(n), xs[idx]) >= real.config.tau(n)
    return member


def default_shell_count(real: FieldRealization) -> int:
    """Anzahl der Schalen τ_{k+1}<r≤τ_k oberhalb der Abschneidegrenze"""
    floor = TRUNCATION_SAFETY * real.truncation_scale
    count = 0
    while real.config.tau(count + 1) >= floor:
        count += 1
    return max(count, 1)


def _shell_offsets(rng: np.random.Generator, count: int, outer: float, inner: float, dim: int) -> np.ndarray:
    """Volumengleichverteilte Differenzen mit inner < ‖d‖ ≤ outer"""
    if dim == 1:
        r = inner + (outer - inner) * (1.0 - rng.random(count))
        sign = np.where(rng.random(count) < 0.5, -1.0, 1.0)
        return (r * sign).reshape(-1, 1)
    r = np.sqrt(inner ** 2 + (outer ** 2 - inner ** 2) * (1.0 - rng.random(count)))
    phi = 2.0 * math.pi * rng.random(count)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi)])


def _shell_volume(outer: float, inner: float, dim: int) -> float:
    if dim == 1:
        return 2.0 * (outer - inner)
    return math.pi * (outer ** 2 - inner ** 2)


def energy_integral(real: FieldRealization, s: float, n_start: int, pair_budget: int, seed: int,
                    shells: Optional[int] = None) -> EnergyEstimate:
    """
    Monte-Carlo-Schätzung von I_s über W_N × W_N

    x wird gleichverteilt in [0,1]^D gezogen und nur in W_N behalten;
    je Schale τ_{k+1}<‖x−y‖≤τ_k wird ein y gezogen. Paare mit y außerhalb
    von [0,1]^D oder W_N tragen 0 bei.

    Args:
        real: Voronoi-Realisierung
        s: Exponent > 1
        n_start: N in W_N
        pair_budget: Anzahl der Kandidaten für x
        seed: Seed der Ziehung
        shells: Anzahl der Schalen (Standard: bis zur Abschneidegrenze)

    Returns:
        EnergyEstimate
    """
    config = real.config
    if not s > 1:
        raise ParameterError("s muss > 1 sein")
    if config.family != Family.VORONOI:
        raise ParameterError("Oszillationsmengen sind nur für die Voronoi-Familie definiert")
    if not 0 <= n_start <= config.depth:
        raise ParameterError(f"N muss in 0..{config.depth} liegen")
    if pair_budget < 1:
        raise ParameterError("Paarbudget muss >= 1 sein")
    dim = real.dimension
    shell_count = shells if shells is not None else default_shell_count(real)
    if shell_count < 1:
        raise ParameterError("Mindestens eine Schale erforderlich")

    rng = np.random.default_rng(derive_seed(seed, "energy", "x"))
    lo = np.asarray(real.window.lower)
    hi = np.asarray(real.window.upper)
    candidates = lo + (hi - lo) * rng.random((pair_budget, dim))
    xs = candidates[in_oscillation_sets(real, candidates, n_start)]
    acceptance = len(xs) / pair_budget
    if acceptance < MIN_ACCEPTANCE or len(xs) < 2:
        raise DegenerateError(f"W_{n_start}-Akzeptanzrate {acceptance:.2e} zu klein; größeres N wählen")
    fx = real.values(xs)

    # h(x) = Σ_k Schalenvolumen·Integrand, ein y je Schale
    contributions = np.zeros(len(xs))
    min_distance = math.inf
    for k in range(shell_count):
        outer, inner = config.tau(k), config.tau(k + 1)
        shell_rng = np.random.default_rng(derive_seed(seed, "energy", "shell", k))
        offsets = _shell_offsets(shell_rng, len(xs), outer, inner, dim)
        ys = xs + offsets
        ok = np.all((ys >= lo) & (ys <= hi), axis=1)
        ok[ok] = in_oscillation_sets(real, ys[ok], n_start)
        if not ok.any():
            continue
        r2 = np.einsum("qd,qd->q", offsets[ok], offsets[ok])
        dz = fx[ok] - real.values(ys[ok])
        contributions[ok] += _shell_volume(outer, inner, dim) * (dz * dz + r2) ** (-s / 2.0)
        min_distance = min(min_distance, float(np.sqrt(r2.min())))

    mean = math.fsum(contributions) / len(xs)
    stderr = acceptance * float(np.std(contributions, ddof=1)) / math.sqrt(len(xs))
    estimate = EnergyEstimate(
        s=s, estimate=acceptance * mean, stderr=stderr, pairs=len(xs) * shell_count,
        acceptance_rate=acceptance, n_start=n_start, hurst=config.hurst,
        shells=(0, shell_count - 1), min_distance=min_distance,
    )
    logger.info("Energie s=%.2f: %.4g ± %.2g (Akzeptanz %.3f)", s, estimate.estimate, stderr, acceptance)
    return estimate


def energy_refinement(real: FieldRealization, s: float, n_start: int, seed: int,
                      budgets: Optional[Sequence[int]] = None, shells: Optional[Sequence[int]] = None,
                      pair_budget: int = 20_000) -> List[EnergyEstimate]:
    """Schätzungen für eine Folge von Budgets oder Schalenzahlen (Konvergenzdiagnose)"""
    if (budgets is None) == (shells is None):
        raise ParameterError("Genau eine Verfeinerung angeben: budgets oder shells")
    if budgets is not None:
        return [energy_integral(real, s, n_start, b, seed) for b in budgets]
    return [energy_integral(real, s, n_start, pair_budget, seed, shells=k) for k in shells]

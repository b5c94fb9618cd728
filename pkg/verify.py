"""Verify - Statistische Prüfungen der Verteilungsaussagen

Alle Simulationen laufen in Blöcken unabhängiger Realisierungen
(PoissonBatch) mit Seeds ``derive_seed(seed, name, block)``; die
Ergebnisse hängen nur von den Seeds ab.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from field import increment_closed_form
from geometry import batch_clearance, batch_nearest_distance, batch_simplices
from models import ParameterError, VerificationResult
from pointprocess import PoissonBatch, centered_window, derive_seed, sample_poisson_batch


logger = logging.getLogger(__name__)

SIGNIFICANCE = 0.01
MIN_ACCEPTANCE = 1e-3
BLOCK_TRIALS = 50_000
# Halbe Fensterbreite in Einheiten von μ^{−1/D}
HALF_WIDTH = {1: 12.0, 2: 6.0}
DECAY_TOLERANCE = 0.15
DRIFT_TOLERANCE = 0.02


# ===== HILFSFUNKTIONEN =====

def dkw_band(samples: int, significance: float = SIGNIFICANCE) -> float:
    """Dvoretzky–Kiefer–Wolfowitz-Band ε = sqrt(ln(2/a)/(2n))"""
    return math.sqrt(math.log(2.0 / significance) / (2.0 * samples))


def _check_dimension(dimension: int) -> None:
    if dimension not in (1, 2):
        raise ParameterError("Nur D=1 oder D=2 werden unterstützt")


def _check_exponents(lam: float, beta: float, hurst: float, alpha: Optional[float] = None) -> None:
    if not lam > 1:
        raise ParameterError("Lambda muss größer als 1 sein")
    if alpha is not None and not 0 < alpha <= beta:
        raise ParameterError("Es muss 0 < alpha <= beta gelten")
    if not (0 < beta <= 1 and hurst > beta):
        raise ParameterError("Es muss 0 < beta <= 1 und H > beta gelten")


def _blocks(total: int, size: int = BLOCK_TRIALS):
    for index, start in enumerate(range(0, total, size)):
        yield index, min(size, total - start)


@dataclass
class _IncrementSample:
    values: np.ndarray
    trials: int
    accepted: int
    invalid: int

    @property
    def acceptance(self) -> float:
        return self.accepted / self.trials


def batch_increments(batch: PoissonBatch, x: np.ndarray, y: np.ndarray, tau: float,
                     amplitude: float) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Z_n(x,y) für alle Versuche eines Batches mit x ∈ O_{n,n}

    Gleiche Schritte wie :func:`field.increment_Zn` für eine Realisierung:
    Simplex (c, c′) von x, Mitgliedschaft über den Facettenabstand ≥ τ und
    dann :func:`field.increment_closed_form`, nur spaltenweise über alle
    Versuche statt über eine Kernmenge.

    Returns:
        (Maske der akzeptierten Versuche, Zuwächse in Versuchsreihenfolge, verworfene Versuche)
    """
    simplices = batch_simplices(batch, x)
    clearance = batch_clearance(simplices, x)
    member = simplices.valid & (clearance >= tau)
    invalid = int(np.sum(~simplices.valid & ~simplices.at_nucleus))
    z = increment_closed_form(simplices.nucleus[member], simplices.secondary[member], x, y, amplitude)
    return member, np.atleast_1d(z), invalid


def _simulate_increments(lam: float, alpha: float, beta: float, hurst: float, dimension: int,
                         n: int, x: np.ndarray, y: np.ndarray, samples: int, seed: int,
                         name: str) -> _IncrementSample:
    """Z_n(x,y) über unabhängige Generationen n, bedingt auf x ∈ O_{n,n}"""
    intensity = lam ** (n * beta)
    tau = lam ** (-n * hurst / dimension)
    amplitude = lam ** (-n * alpha / dimension)
    window = centered_window(x, HALF_WIDTH[dimension] * intensity ** (-1.0 / dimension))
    collected: List[np.ndarray] = []
    accepted = trials = invalid = 0
    block = 0
    while accepted < samples:
        batch = sample_poisson_batch(intensity, window, derive_seed(seed, name, block), BLOCK_TRIALS)
        member, z, dropped = batch_increments(batch, x, y, tau, amplitude)
        invalid += dropped
        trials += BLOCK_TRIALS
        collected.append(z)
        accepted += int(member.sum())
        block += 1
        if accepted / trials < MIN_ACCEPTANCE:
            raise ParameterError(f"Akzeptanzrate {accepted / trials:.2e} für x ∈ O_{{{n},{n}}} zu klein")
    values = np.concatenate(collected)[:samples]
    if invalid:
        logger.warning("%s: %d Versuche ohne beschränkten Simplex verworfen", name, invalid)
    return _IncrementSample(values=values, trials=trials, accepted=accepted, invalid=invalid)


# ===== DICHTE VON Z_n (D=1) =====

def _survival(length: np.ndarray, mu: float, tau: float) -> np.ndarray:
    """P(x ∈ O_{n,n}, Intervalllänge ≥ L) = e^{−μL}(1+μ(L−4τ)) für L ≥ 4τ"""
    length = np.maximum(length, 4.0 * tau)
    return np.exp(-mu * length) * (1.0 + mu * (length - 4.0 * tau))


def z1d_density(t, lam: float, alpha: float, beta: float, hurst: float, n: int, delta: float,
                p_in: Optional[float] = None) -> np.ndarray:
    """
    Dichte von Z_n(x,y) gegeben x ∈ O_{n,n} für D=1

    g(t) = 2μ²/P · e^{−2μAδ/|t|} (Aδ/|t| − 2τ_n) Aδ/t² für |t| < Aδ/(2τ_n),
    μ = λ^{nβ}, A = λ^{−nα}, δ = |x−y|. Ohne ``p_in`` wird die exakte
    Wahrscheinlichkeit P = e^{−4μτ_n} verwendet.
    """
    t = np.abs(np.asarray(t, dtype=float))
    mu = lam ** (n * beta)
    amp = lam ** (-n * alpha)
    tau = lam ** (-n * hurst)
    p = p_in if p_in is not None else math.exp(-4.0 * mu * tau)
    a_delta = amp * delta
    inside = (t > 0) & (t < a_delta / (2.0 * tau))
    safe = np.where(inside, t, 1.0)
    g = 2.0 * mu * mu * np.exp(-2.0 * mu * a_delta / safe) * (a_delta / safe - 2.0 * tau) * a_delta / safe ** 2 / p
    return np.where(inside, g, 0.0)


def z1d_cdf(t, lam: float, alpha: float, beta: float, hurst: float, n: int, delta: float,
            p_in: Optional[float] = None) -> np.ndarray:
    """Verteilungsfunktion zu :func:`z1d_density` (geschlossene Form)"""
    t = np.asarray(t, dtype=float)
    mu = lam ** (n * beta)
    amp = lam ** (-n * alpha)
    tau = lam ** (-n * hurst)
    p_exact = math.exp(-4.0 * mu * tau)
    p = p_in if p_in is not None else p_exact
    magnitude = np.abs(t)
    with np.errstate(divide="ignore"):
        length = np.where(magnitude > 0, 2.0 * amp * delta / np.where(magnitude > 0, magnitude, 1.0), np.inf)
    tail = np.where(np.isfinite(length), _survival(np.where(np.isfinite(length), length, 0.0), mu, tau), 0.0)
    negative = 0.5 * (p_exact - tail) / p
    positive = 0.5 * (p_exact + tail) / p
    return np.where(t < 0, negative, positive)


def outside_probability_1d(lam: float, beta: float, hurst: float, n: int, big_n: int) -> float:
    """Exakte Wahrscheinlichkeit P(x ∉ O_{n,N}) = 1 − e^{−4λ^{nβ}τ_N} für D=1"""
    return 1.0 - math.exp(-4.0 * lam ** (n * beta) * lam ** (-big_n * hurst))


@dataclass
class DensityComparison:
    """Histogramm von Z_n gegen die geschlossene Form"""
    edges: np.ndarray
    empirical_masses: np.ndarray
    model_masses: np.ndarray
    sup_distance: float
    samples: int
    acceptance: float
    support_limit: float
    support_max: float
    band: float
    ks_statistic: float
    negative_fraction: float
    parameters: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.sup_distance <= self.band and self.support_max <= self.support_limit * (1 + 1e-12)

    def as_result(self) -> VerificationResult:
        return VerificationResult(
            name="density_z1d", parameters=self.parameters, statistic=self.sup_distance,
            threshold=self.band, passed=self.passed,
            details={
                "samples": self.samples, "acceptance": self.acceptance,
                "ks_statistic": self.ks_statistic, "support_limit": self.support_limit,
                "support_max": self.support_max, "negative_fraction": self.negative_fraction,
                "model_mass_total": float(self.model_masses.sum()),
            },
        )


def empirical_density_Z1D(lam: float, alpha: float, beta: float, hurst: float, n: int,
                          x: float, y: float, samples: int, seed: int, bins: int = 200) -> DensityComparison:
    """
    Vergleiche das Histogramm von Z_n(x,y) mit der geschlossenen Dichte (D=1)

    Modellmassen nutzen die empirische Wahrscheinlichkeit P(x ∈ O_{n,n});
    die sup-Distanz der Verteilungsfunktionen über die Klassengrenzen wird
    mit dem 1%-DKW-Band verglichen.
    """
    _check_exponents(lam, beta, hurst, alpha)
    delta = abs(float(x) - float(y))
    tau = lam ** (-n * hurst)
    if not 0 < delta <= tau:
        raise ParameterError(f"Es muss 0 < |x−y| <= τ_{n} gelten")
    if samples < 1:
        raise ParameterError("Mindestens eine Ziehung erforderlich")
    sample = _simulate_increments(lam, alpha, beta, hurst, 1, n, np.array([float(x)]), np.array([float(y)]),
                                  samples, seed, "density")
    p_hat = sample.acceptance
    limit = lam ** (-n * alpha) * delta / (2.0 * tau)
    edges = np.linspace(-limit, limit, bins + 1)
    counts, _ = np.histogram(sample.values, bins=edges)
    empirical = counts / len(sample.values)
    cdf = z1d_cdf(edges, lam, alpha, beta, hurst, n, delta, p_in=p_hat)
    model = np.diff(cdf)
    sup_distance = float(np.max(np.abs(np.concatenate([[0.0], np.cumsum(empirical)]) - (cdf - cdf[0]))))
    ks = stats.kstest(sample.values, lambda t: z1d_cdf(t, lam, alpha, beta, hurst, n, delta))
    parameters = {"lambda": lam, "alpha": alpha, "beta": beta, "H": hurst, "n": n,
                  "x": float(x), "y": float(y), "samples": samples}
    comparison = DensityComparison(
        edges=edges, empirical_masses=empirical, model_masses=model, sup_distance=sup_distance,
        samples=len(sample.values), acceptance=p_hat, support_limit=limit,
        support_max=float(np.max(np.abs(sample.values))), band=dkw_band(len(sample.values)),
        ks_statistic=float(ks.statistic), negative_fraction=float(np.mean(sample.values < 0)),
        parameters=parameters,
    )
    logger.info("Dichte Z_%d: sup-Distanz %.4f (Band %.4f)", n, sup_distance, comparison.band)
    return comparison


@dataclass
class SupProfile:
    """Normierte Histogramm-Maxima von Z_n für mehrere (n, ‖x−y‖)"""
    rows: List[Tuple[int, float, float, float]]
    spread_limit: float = 10.0
    parameters: Dict[str, Any] = field(default_factory=dict)

    @property
    def spread(self) -> float:
        normalized = [r[3] for r in self.rows]
        return max(normalized) / min(normalized)

    @property
    def passed(self) -> bool:
        return all(math.isfinite(r[3]) and r[3] > 0 for r in self.rows) and self.spread <= self.spread_limit

    def as_result(self) -> VerificationResult:
        return VerificationResult(
            name="density_sup_profile", parameters=self.parameters, statistic=self.spread,
            threshold=self.spread_limit, passed=self.passed,
            details={"rows": [list(r) for r in self.rows]},
        )


def density_sup_profile(lam: float, alpha: float, beta: float, hurst: float, dimension: int,
                        cases: Sequence[Tuple[int, float]], samples: int, seed: int,
                        bins: int = 50) -> SupProfile:
    """
    Maximum der Histogrammdichte von Z_n, normiert mit ‖x−y‖^{−1}λ^{−n(β−α)/D}/P(x ∈ O_{n,n})

    ``cases`` enthält Paare (n, ‖x−y‖/τ_n). Die normierten Werte müssen
    beschränkt bleiben (Streuung höchstens Faktor 10).
    """
    _check_dimension(dimension)
    _check_exponents(lam, beta, hurst, alpha)
    rows = []
    for i, (n, fraction) in enumerate(cases):
        if not 0 < fraction <= 1:
            raise ParameterError("‖x−y‖/τ_n muss in (0,1] liegen")
        tau = lam ** (-n * hurst / dimension)
        delta = fraction * tau
        x = np.zeros(dimension)
        y = x.copy()
        y[0] = delta
        sample = _simulate_increments(lam, alpha, beta, hurst, dimension, n, x, y, samples, seed, f"sup-{i}")
        density, _ = np.histogram(sample.values, bins=bins, density=True)
        peak = float(density.max())
        scale = lam ** (-n * (beta - alpha) / dimension) / delta / sample.acceptance
        rows.append((int(n), float(delta), peak, peak / scale))
    parameters = {"lambda": lam, "alpha": alpha, "beta": beta, "H": hurst, "D": dimension,
                  "cases": [list(c) for c in cases], "samples": samples}
    return SupProfile(rows=rows, parameters=parameters)


# ===== ABKLINGEN VON P(x ∉ O_{n,N}) =====

@dataclass
class DecayFit:
    """Empirische P(0 ∉ O_{n,N}) und Regression gegen (nβ−NH)/D·log λ"""
    cells: List[Dict[str, Any]]
    slope: float
    intercept: float
    stderr: float
    excluded: List[Tuple[int, int]]
    parameters: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return abs(self.slope - 1.0) <= DECAY_TOLERANCE

    def as_result(self) -> VerificationResult:
        return VerificationResult(
            name="oscillation_set_decay", parameters=self.parameters, statistic=self.slope,
            threshold=DECAY_TOLERANCE, passed=self.passed,
            details={"cells": self.cells, "excluded": [list(e) for e in self.excluded],
                     "intercept": self.intercept, "stderr": self.stderr},
        )


def outside_fraction(lam: float, beta: float, hurst: float, dimension: int, n: int, big_n: int,
                     trials: int, seed: int) -> Tuple[int, int]:
    """Anzahl (außerhalb, gültig) für 0 ∉ O_{n,N} über unabhängige Generationen n"""
    intensity = lam ** (n * beta)
    radius = lam ** (-big_n * hurst / dimension)
    origin = np.zeros(dimension)
    window = centered_window(origin, HALF_WIDTH[dimension] * intensity ** (-1.0 / dimension))
    outside = valid = 0
    for block, size in _blocks(trials):
        batch = sample_poisson_batch(intensity, window, derive_seed(seed, "decay", n, big_n, block), size)
        simplices = batch_simplices(batch, origin)
        clearance = batch_clearance(simplices, origin)
        usable = simplices.valid | simplices.at_nucleus
        outside += int(np.sum(usable & ~(clearance >= radius)))
        valid += int(usable.sum())
    return outside, valid


def oscillation_set_decay(lam: float, beta: float, hurst: float, grid: Sequence[Tuple[int, int]],
                          trials: int, seed: int, dimension: int = 1) -> DecayFit:
    """
    Monte Carlo für P(0 ∉ O_{n,N}) auf einem Gitter von (n, N)

    Zellen ohne Treffer werden aus der Regression ausgeschlossen und
    vermerkt. Für D=1 wird die exakte Wahrscheinlichkeit mitgeliefert.
    """
    _check_dimension(dimension)
    _check_exponents(lam, beta, hurst)
    if any(not 0 <= n <= big_n for n, big_n in grid):
        raise ParameterError("Es muss 0 <= n <= N für alle Gitterzellen gelten")
    cells, excluded, xs, ys = [], [], [], []
    for n, big_n in grid:
        outside, valid = outside_fraction(lam, beta, hurst, dimension, n, big_n, trials, seed)
        probability = outside / valid if valid else 0.0
        predicted = (n * beta - big_n * hurst) / dimension * math.log(lam)
        cell = {"n": n, "N": big_n, "probability": probability, "outside": outside, "trials": valid,
                "predicted_exponent": predicted}
        if dimension == 1:
            cell["exact"] = outside_probability_1d(lam, beta, hurst, n, big_n)
        cells.append(cell)
        if outside == 0:
            excluded.append((n, big_n))
            continue
        xs.append(predicted)
        ys.append(math.log(probability))
    if len(xs) < 3:
        raise ParameterError("Zu wenige Zellen mit Treffern für die Regression")
    fit = stats.linregress(xs, ys)
    logger.info("Abklingexponent %.3f aus %d Zellen", fit.slope, len(xs))
    return DecayFit(cells=cells, slope=float(fit.slope), intercept=float(fit.intercept),
                    stderr=float(fit.stderr), excluded=excluded,
                    parameters={"lambda": lam, "beta": beta, "H": hurst, "D": dimension,
                                "grid": [list(g) for g in grid], "trials": trials})


# ===== LIPSCHITZ-KONSTANTE =====

@dataclass
class LipschitzMean:
    """Mittelwert von L(0) = 2/‖c−c′‖ mit Stabilisierungsdiagnose"""
    mean: float
    stderr: float
    trials: int
    accepted: int
    drift: float
    conditioning: Optional[Dict[str, float]] = None
    expected: Optional[float] = None
    tolerance: float = 0.05

    @property
    def passed(self) -> bool:
        ok = self.drift < DRIFT_TOLERANCE
        if self.expected is not None:
            ok = ok and abs(self.mean - self.expected) <= self.tolerance
        return ok

    def as_result(self, name: str = "lipschitz_mean") -> VerificationResult:
        return VerificationResult(
            name=name, parameters={"conditioning": self.conditioning, "trials": self.trials},
            statistic=self.mean,
            threshold=self.expected if self.expected is not None else DRIFT_TOLERANCE,
            passed=self.passed,
            details={"stderr": self.stderr, "accepted": self.accepted, "drift": self.drift,
                     "tolerance": self.tolerance},
        )


def lipschitz_mean(dimension: int, trials: int, seed: int,
                   conditioning: Optional[Tuple[int, int, float, float, float]] = None) -> LipschitzMean:
    """
    Empirisches E(L(0)) für einen Prozess der Intensität 1

    Args:
        dimension: D
        trials: Anzahl der Realisierungen
        seed: Seed
        conditioning: optional (n, N, H, λ, β); dann nur Realisierungen mit
            0 ∈ Õ_{n,N}, d.h. Kugelradius λ^{nβ/D}τ_N im Simplex

    Returns:
        LipschitzMean (Drift = relative Änderung zwischen 90% und 100% der Ziehung)
    """
    _check_dimension(dimension)
    if trials < 1:
        raise ParameterError("Mindestens ein Versuch erforderlich")
    radius = 0.0
    described = None
    if conditioning is not None:
        n, big_n, hurst, lam, beta = conditioning
        _check_exponents(lam, beta, hurst)
        if not 0 <= n <= big_n:
            raise ParameterError("Es muss 0 <= n <= N gelten")
        radius = lam ** (n * beta / dimension) * lam ** (-big_n * hurst / dimension)
        described = {"n": n, "N": big_n, "H": hurst, "lambda": lam, "beta": beta, "radius": radius}
    origin = np.zeros(dimension)
    window = centered_window(origin, HALF_WIDTH[dimension])
    values: List[np.ndarray] = []
    for block, size in _blocks(trials):
        batch = sample_poisson_batch(1.0, window, derive_seed(seed, "lipschitz", block), size)
        simplices = batch_simplices(batch, origin)
        ok = simplices.valid
        if conditioning is not None:
            ok = ok & (batch_clearance(simplices, origin) >= radius)
        gap = np.linalg.norm(simplices.nucleus[ok] - simplices.secondary[ok], axis=1)
        values.append(2.0 / gap)
    sample = np.concatenate(values) if values else np.zeros(0)
    if len(sample) < 10:
        raise ParameterError("Zu wenige akzeptierte Versuche für einen Mittelwert")
    mean = math.fsum(sample) / len(sample)
    head = sample[: int(0.9 * len(sample))]
    drift = abs(math.fsum(head) / len(head) - mean) / mean
    expected = 2.0 if dimension == 1 and conditioning is None else None
    result = LipschitzMean(mean=mean, stderr=float(np.std(sample, ddof=1) / math.sqrt(len(sample))),
                           trials=trials, accepted=len(sample), drift=drift,
                           conditioning=described, expected=expected)
    logger.info("E(L(0)) = %.4f (%d Versuche, Drift %.3f)", mean, len(sample), drift)
    return result


# ===== SKALENINVARIANZ =====

@dataclass
class ScalingTest:
    """KS mit zwei Ziehungen: skalierte Generation n gegen direkte Generation n−1"""
    statistic: float
    pvalue: float
    factor: float
    trials: int
    negative_control: bool
    parameters: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.pvalue > SIGNIFICANCE

    @property
    def critical_value(self) -> float:
        """Asymptotischer 1%-Wert c(a)·sqrt(2/m)"""
        return math.sqrt(-0.5 * math.log(SIGNIFICANCE / 2.0)) * math.sqrt(2.0 / self.trials)

    def as_result(self) -> VerificationResult:
        return VerificationResult(
            name="scaling_invariance", parameters=self.parameters, statistic=self.statistic,
            threshold=self.critical_value, passed=self.passed,
            details={"pvalue": self.pvalue, "factor": self.factor, "negative_control": self.negative_control},
        )


def _nearest_distances(intensity: float, dimension: int, trials: int, seed: int, name: str,
                       factor: float = 1.0) -> np.ndarray:
    origin = np.zeros(dimension)
    window = centered_window(origin, HALF_WIDTH[dimension] * intensity ** (-1.0 / dimension))
    out = []
    for block, size in _blocks(trials):
        batch = sample_poisson_batch(intensity, window, derive_seed(seed, name, block), size)
        if factor != 1.0:
            batch = batch.rescaled(factor)
        out.append(batch_nearest_distance(batch, origin))
    distances = np.concatenate(out)
    return distances[np.isfinite(distances)]


def scaling_invariance_test(lam: float, beta: float, n: int, trials: int, seed: int,
                            dimension: int = 2, negative_control: bool = False) -> ScalingTest:
    """
    λ^{β/D}·X_n gegen X_{n−1}: Abstand von 0 zum nächsten Kern

    Mit ``negative_control`` wird absichtlich der Faktor λ^{2β/D} benutzt;
    der Test muss dann ablehnen.
    """
    _check_dimension(dimension)
    if n < 1:
        raise ParameterError("n muss >= 1 sein")
    if not (lam > 1 and 0 < beta <= 1):
        raise ParameterError("Es muss λ > 1 und 0 < β <= 1 gelten")
    factor = lam ** ((2.0 if negative_control else 1.0) * beta / dimension)
    scaled = _nearest_distances(lam ** (n * beta), dimension, trials, seed, f"scaling-{n}", factor)
    direct = _nearest_distances(lam ** ((n - 1) * beta), dimension, trials, seed, f"scaling-{n - 1}")
    result = stats.ks_2samp(scaled, direct)
    logger.info("KS Skaleninvarianz n=%d: D=%.4f, p=%.4f", n, result.statistic, result.pvalue)
    return ScalingTest(statistic=float(result.statistic), pvalue=float(result.pvalue), factor=factor,
                       trials=trials, negative_control=negative_control,
                       parameters={"lambda": lam, "beta": beta, "n": n, "D": dimension, "trials": trials})

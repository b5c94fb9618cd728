"""Pointprocess - Poisson-Punktprozesse pro Generation"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from models import FieldConfig, ParameterError, ReportStorage, Window


logger = logging.getLogger(__name__)

MARGIN_FACTOR = 5.0


# ===== SEEDS =====

def derive_seed(master_seed: int, *keys) -> int:
    """Leite einen 64-Bit-Seed aus Master-Seed und Schlüsseln ab

    Regel: SHA-256 über ``"master:key1:key2..."``, die ersten 8 Bytes
    big-endian als vorzeichenlose Ganzzahl. Generation n der
    Voronoi-Familie nutzt ``derive_seed(seed, "voronoi", n)``.
    """
    text = ":".join(str(part) for part in (master_seed, *keys))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def default_margin(intensity: float, dimension: int) -> float:
    """Standardrand 5·intensity^{−1/D}"""
    return MARGIN_FACTOR * intensity ** (-1.0 / dimension)


# ===== NUCLEUS SET =====

@dataclass(frozen=True, eq=False)
class NucleusSet:
    """Kerne einer Generation (unveränderlich nach Konstruktion)"""

    generation: int
    intensity: float
    points: np.ndarray
    seed: int
    window: Window

    def __post_init__(self):
        """Validierung nach Initialisierung"""
        if self.generation < 0:
            raise ParameterError("Generation muss >= 0 sein")
        if not (self.intensity > 0 and math.isfinite(self.intensity)):
            raise ParameterError("Intensität muss positiv und endlich sein")
        points = np.array(self.points, dtype=float).reshape(-1, self.window.dimension)
        lo, hi = (np.asarray(b) for b in self.window.inflated())
        tol = 1e-12 * (np.abs(lo) + np.abs(hi) + 1.0)
        if points.size and (np.any(points < lo - tol) or np.any(points > hi + tol)):
            raise ParameterError("Kerne liegen außerhalb des vergrößerten Fensters")
        if len(np.unique(points, axis=0)) != len(points):
            raise ParameterError("Kerne müssen paarweise verschieden sein")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    @property
    def dimension(self) -> int:
        return self.window.dimension

    def __len__(self) -> int:
        return len(self.points)


def sample_poisson(intensity: float, window: Window, seed: int, generation: int = 0) -> NucleusSet:
    """Homogener Poisson-Prozess im vergrößerten Fenster

    Anzahl K ~ Poisson(intensity·V), gegeben K i.i.d. gleichverteilte
    Punkte. Deterministisch in (intensity, window, seed).

    Args:
        intensity: Punkte pro Volumeneinheit (> 0)
        window: Fenster inkl. Rand
        seed: 64-Bit-Seed
        generation: Generationsindex für die Metadaten

    Returns:
        NucleusSet in Erzeugungsreihenfolge
    """
    if not (intensity > 0 and math.isfinite(intensity)):
        raise ParameterError(f"Intensität muss positiv sein: {intensity}")
    volume = window.volume()
    if not (volume > 0 and math.isfinite(volume)):
        raise ParameterError("Fenster hat kein positives endliches Volumen")
    lo, hi = (np.asarray(b) for b in window.inflated())
    rng = np.random.default_rng(seed)
    count = rng.poisson(intensity * volume)
    points = lo + (hi - lo) * rng.random((count, window.dimension))
    logger.debug("Generation %d: %d Kerne (Intensität %g)", generation, count, intensity)
    return NucleusSet(generation=generation, intensity=float(intensity), points=points,
                      seed=seed, window=window)


def generation_window(config: FieldConfig, n: int) -> Window:
    """Fenster der Generation n mit Standard- oder konfiguriertem Rand"""
    intensity = config.intensity(n)
    margin = config.margin if config.margin is not None else default_margin(intensity, config.dimension)
    return config.window.with_margin(margin)


def sample_generation(config: FieldConfig, n: int) -> NucleusSet:
    """Kerne X_n der Voronoi-Familie mit abgeleitetem Seed"""
    return sample_poisson(
        config.intensity(n), generation_window(config, n),
        derive_seed(config.seed, "voronoi", n), generation=n,
    )


def rescale(nuclei: NucleusSet, factor: float) -> NucleusSet:
    """Skaliere alle Kerne mit ``factor``; Intensität wird durch factor^D geteilt"""
    if not (factor > 0 and math.isfinite(factor)):
        raise ParameterError(f"Skalierungsfaktor muss positiv sein: {factor}")
    return NucleusSet(
        generation=nuclei.generation,
        intensity=nuclei.intensity / factor ** nuclei.dimension,
        points=nuclei.points * factor,
        seed=nuclei.seed,
        window=nuclei.window.scaled(factor),
    )


# ===== BATCH (viele unabhängige Realisierungen) =====

@dataclass(frozen=True, eq=False)
class PoissonBatch:
    """Viele unabhängige Realisierungen im selben Fenster

    ``points`` sind nach Versuch gruppiert; ``owners[i]`` ist der Versuch
    des Punktes i. Versuche ohne Punkte tauchen in ``owners`` nicht auf.
    """

    intensity: float
    points: np.ndarray
    owners: np.ndarray
    trials: int
    seed: int
    window: Window

    @property
    def dimension(self) -> int:
        return self.window.dimension

    def trial(self, i: int) -> NucleusSet:
        """Realisierung i als NucleusSet"""
        lo, hi = np.searchsorted(self.owners, [i, i + 1])
        return NucleusSet(generation=0, intensity=self.intensity, points=self.points[lo:hi],
                          seed=derive_seed(self.seed, "trial", i), window=self.window)

    def rescaled(self, factor: float) -> "PoissonBatch":
        """Gleiche Skalierungsregel wie :func:`rescale`"""
        if not (factor > 0 and math.isfinite(factor)):
            raise ParameterError(f"Skalierungsfaktor muss positiv sein: {factor}")
        return PoissonBatch(
            intensity=self.intensity / factor ** self.dimension,
            points=self.points * factor,
            owners=self.owners,
            trials=self.trials,
            seed=self.seed,
            window=self.window.scaled(factor),
        )


def sample_poisson_batch(intensity: float, window: Window, seed: int, trials: int) -> PoissonBatch:
    """Ziehe ``trials`` unabhängige Poisson-Prozesse auf einmal"""
    if trials < 1:
        raise ParameterError("Mindestens ein Versuch erforderlich")
    if not (intensity > 0 and math.isfinite(intensity)):
        raise ParameterError(f"Intensität muss positiv sein: {intensity}")
    lo, hi = (np.asarray(b) for b in window.inflated())
    rng = np.random.default_rng(seed)
    counts = rng.poisson(intensity * window.volume(), size=trials)
    owners = np.repeat(np.arange(trials), counts)
    points = lo + (hi - lo) * rng.random((int(counts.sum()), window.dimension))
    return PoissonBatch(intensity=float(intensity), points=points, owners=owners,
                        trials=trials, seed=seed, window=window)


def centered_window(center: Sequence[float], half_width: float) -> Window:
    """Fenster [center−w, center+w]^D ohne Rand"""
    center = [float(c) for c in np.atleast_1d(center)]
    return Window(dimension=len(center),
                  lower=tuple(c - half_width for c in center),
                  upper=tuple(c + half_width for c in center))


# ===== EXPORT =====

def export_nuclei_csv(sets: List[NucleusSet], storage: ReportStorage, config_digest: str,
                      name: str = "nuclei.csv") -> None:
    """Schreibe Kerne als CSV (generation,index,x1[,x2])"""
    if not sets:
        return
    dimension = sets[0].dimension
    header = ["generation", "index"] + [f"x{i + 1}" for i in range(dimension)]
    rows = []
    for nuclei in sets:
        for index, point in enumerate(nuclei.points):
            rows.append([nuclei.generation, index] + [float(v) for v in point])
    storage.save_csv(name, header, rows, config_digest)

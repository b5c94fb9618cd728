"""Geometry - Punktlokalisierung in der Voronoi-Zerlegung einer Generation

Alle Abfragen arbeiten auf einem unveränderlichen NucleusSet und einem
daraus gebauten Gitterindex (Buckets mit Zellseite ≈ intensity^{−1/D}).
Die Kandidatensuche erweitert Ringe um die Ankerzelle, bis das beste
Ergebnis von allen Punkten außerhalb des Blocks nicht mehr geschlagen
werden kann. Gleichstände gehen an den kleinsten Kernindex.
"""

import logging
import math
import threading
import weakref
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from models import ParameterError, StateError, UnboundedCellError, UnboundedDirectionError
from pointprocess import NucleusSet, PoissonBatch


logger = logging.getLogger(__name__)

NO_INDEX = -1
CHUNK = 8192
EXHAUSTIVE_CELLS = 4_000_000
_BIG = np.iinfo(np.int64).max


# ===== HILFSFUNKTIONEN =====

def _lowest_index_argmin(values: np.ndarray, candidates: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Zeilenweises Minimum; bei Gleichstand gewinnt der kleinste Kandidatenindex"""
    best = values.min(axis=1)
    ties = (values == best[:, None]) & np.isfinite(values)
    chosen = np.where(ties, candidates, _BIG).min(axis=1)
    chosen = np.where(chosen == _BIG, NO_INDEX, chosen)
    return chosen, best


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _as_points(xs, dimension: int) -> np.ndarray:
    return np.asarray(xs, dtype=float).reshape(-1, dimension)


def simplex_clearance(xs: np.ndarray, c: np.ndarray, c2: np.ndarray,
                      p: Optional[np.ndarray] = None, q: Optional[np.ndarray] = None) -> np.ndarray:
    """Minimaler Abstand zu den Facetten des Simplex Conv({c} ∪ f)

    D=1: Strecke [c, (c+c′)/2]. D=2: Dreieck (c, p, q) mit der Außenkante
    p–q auf der Mittelsenkrechten zu c′. Negative Werte heißen: außerhalb.
    """
    xs = np.atleast_2d(xs)
    if xs.shape[1] == 1:
        direction = np.sign(c2 - c)
        mid = 0.5 * (c + c2)
        return np.minimum(((xs - c) * direction)[:, 0], ((mid - xs) * direction)[:, 0])
    flip = _cross(p - c, q - c) < 0
    p, q = np.where(flip[:, None], q, p), np.where(flip[:, None], p, q)
    d1 = _cross(p - c, xs - c) / np.linalg.norm(p - c, axis=1)
    d2 = _cross(q - p, xs - p) / np.linalg.norm(q - p, axis=1)
    d3 = _cross(c - q, xs - q) / np.linalg.norm(c - q, axis=1)
    return np.minimum(np.minimum(d1, d2), d3)


# ===== GITTERINDEX =====

class GridIndex:
    """Gitter-Buckets über dem vergrößerten Fenster"""

    def __init__(self, points: np.ndarray, lower: Sequence[float], upper: Sequence[float], side: float):
        """
        Baue Bucket-Tabelle (eine Zeile pro Gitterzelle, Punktindizes in Erzeugungsreihenfolge)

        Args:
            points: Kerne, Form (K, D)
            lower, upper: Ecken der vergrößerten Region
            side: Zellseite
        """
        self.points = points
        self.dimension = points.shape[1]
        self.lower = np.asarray(lower, dtype=float)
        self.side = float(side)
        extent = np.asarray(upper, dtype=float) - self.lower
        self.shape = tuple(max(1, int(math.ceil(e / self.side))) for e in extent)
        ncells = int(np.prod(self.shape))

        flat = self._flat(self._cells(points)) if len(points) else np.zeros(0, dtype=np.int64)
        counts = np.bincount(flat, minlength=ncells)
        self.depth = max(int(counts.max()) if len(points) else 0, 1)
        order = np.argsort(flat, kind="stable")
        starts = np.cumsum(counts) - counts
        ranks = np.arange(len(points)) - starts[flat[order]]
        slots = np.full((ncells + 1, self.depth), NO_INDEX, dtype=np.int64)
        slots[flat[order], ranks] = order
        self._slots = slots
        self._empty_row = ncells
        self._offsets_cache = {}
        logger.debug("GridIndex: %d Punkte, Gitter %s, Tiefe %d", len(points), self.shape, self.depth)

    @classmethod
    def for_set(cls, nuclei: NucleusSet) -> "GridIndex":
        lo, hi = nuclei.window.inflated()
        side = nuclei.intensity ** (-1.0 / nuclei.dimension)
        return cls(nuclei.points, lo, hi, side)

    def _cells(self, xs: np.ndarray) -> np.ndarray:
        cells = np.floor((xs - self.lower) / self.side).astype(np.int64)
        return np.clip(cells, 0, np.asarray(self.shape) - 1)

    def _flat(self, cells: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(cells.T), self.shape)

    def _offsets(self, ring: int) -> np.ndarray:
        if ring not in self._offsets_cache:
            axes = [np.arange(-ring, ring + 1)] * self.dimension
            grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
            self._offsets_cache[ring] = grid.reshape(-1, self.dimension)
        return self._offsets_cache[ring]

    def _exhaustive(self, ring: int) -> bool:
        block = (2 * ring + 1) ** self.dimension * self.depth
        return ring >= max(self.shape) - 1 or block >= len(self.points)

    def _gather(self, cells: np.ndarray, ring: int) -> np.ndarray:
        """Kandidaten aller Zellen im Block [cell−ring, cell+ring]^D"""
        neighbors = cells[:, None, :] + self._offsets(ring)[None, :, :]
        valid = np.all((neighbors >= 0) & (neighbors < np.asarray(self.shape)), axis=2)
        neighbors = np.where(valid[..., None], neighbors, 0)
        flat = np.ravel_multi_index(tuple(np.moveaxis(neighbors, -1, 0)), self.shape)
        flat = np.where(valid, flat, self._empty_row)
        return self._slots[flat].reshape(len(cells), -1)

    def _expand(self, anchors: np.ndarray, first_ring: int,
                evaluate: Callable[[np.ndarray, np.ndarray], Tuple[Tuple[np.ndarray, ...], np.ndarray]]
                ) -> List[np.ndarray]:
        """Ring-Expansion um die Ankerzellen

        ``evaluate(rows, candidates)`` liefert Ergebnisse und den Radius um
        den Anker, den das Ergebnis abgedeckt haben muss. Eine Zeile ist
        fertig, sobald dieser Radius im aktuellen Block liegt.
        """
        cells = self._cells(anchors)
        pending = np.arange(len(anchors))
        outputs: Optional[List[np.ndarray]] = None
        ring = first_ring
        while pending.size:
            if self._exhaustive(ring):
                step = max(1, EXHAUSTIVE_CELLS // max(len(self.points), 1))
                batches = []
                everything = np.arange(len(self.points))
                for start in range(0, pending.size, step):
                    rows = pending[start:start + step]
                    cand = np.broadcast_to(everything, (rows.size, everything.size))
                    batches.append((rows, evaluate(rows, cand)[0]))
                for rows, values in batches:
                    if outputs is None:
                        outputs = [np.empty((len(anchors),) + v.shape[1:], v.dtype) for v in values]
                    for out, v in zip(outputs, values):
                        out[rows] = v
                break
            values, needed = evaluate(pending, self._gather(cells[pending], ring))
            if outputs is None:
                outputs = [np.empty((len(anchors),) + v.shape[1:], v.dtype) for v in values]
            done = needed <= ring * self.side
            for out, v in zip(outputs, values):
                out[pending[done]] = v[done]
            pending = pending[~done]
            ring *= 2
        return outputs or []

    # ----- Abfragen -----

    def nearest(self, xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Nächster Kern (Index, Abstand) für jeden Anfragepunkt"""
        if len(self.points) == 0:
            raise StateError("Nächster Kern einer leeren Menge ist undefiniert")
        idx = np.empty(len(xs), dtype=np.int64)
        dist = np.empty(len(xs))

        for start in range(0, len(xs), CHUNK):
            block = xs[start:start + CHUNK]

            def evaluate(rows, cand, block=block):
                diff = self.points[cand] - block[rows, None, :]
                d2 = np.where(cand >= 0, np.einsum("qkd,qkd->qk", diff, diff), np.inf)
                chosen, best = _lowest_index_argmin(d2, cand)
                radius = np.sqrt(best)
                return (chosen, radius), radius

            if len(block):
                chosen, radius = self._expand(block, 1, evaluate)
                idx[start:start + CHUNK] = chosen
                dist[start:start + CHUNK] = radius
        return idx, dist

    def secondary(self, xs: np.ndarray, c_idx: np.ndarray) -> np.ndarray:
        """Sekundärkern: erste gekreuzte Mittelsenkrechte auf dem Strahl [c, x)

        Liefert NO_INDEX, wenn kein Kandidat existiert (Strahl verlässt die Menge).
        """
        out = np.empty(len(xs), dtype=np.int64)
        for start in range(0, len(xs), CHUNK):
            block = xs[start:start + CHUNK]
            c_block = c_idx[start:start + CHUNK]
            anchors = self.points[c_block]
            u = block - anchors
            u = u / np.linalg.norm(u, axis=1, keepdims=True)

            def evaluate(rows, cand, anchors=anchors, u=u, c_block=c_block):
                w = self.points[cand] - anchors[rows, None, :]
                proj = np.einsum("qkd,qd->qk", w, u[rows])
                usable = (cand >= 0) & (cand != c_block[rows, None]) & (proj > 0)
                t = np.full(proj.shape, np.inf)
                np.divide(np.einsum("qkd,qkd->qk", w, w), 2.0 * proj, out=t, where=usable)
                chosen, best = _lowest_index_argmin(t, cand)
                return (chosen,), 2.0 * best

            if len(block):
                out[start:start + CHUNK] = self._expand(anchors, 2, evaluate)[0]
        return out

    def facets(self, c_idx: np.ndarray, s_idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Endpunkte der Kante von C_c auf der Mittelsenkrechten zu c′ (nur D=2)

        Unbeschränkte Enden werden als ±inf geliefert.
        """
        p_out = np.empty((len(c_idx), 2))
        q_out = np.empty((len(c_idx), 2))
        for start in range(0, len(c_idx), CHUNK):
            cb = c_idx[start:start + CHUNK]
            sb = s_idx[start:start + CHUNK]
            c = self.points[cb]
            d = self.points[sb] - c
            normal = d / np.linalg.norm(d, axis=1, keepdims=True)
            e = np.stack([-normal[:, 1], normal[:, 0]], axis=1)
            mid = c + 0.5 * d
            mc = mid - c

            def evaluate(rows, cand, c=c, e=e, mid=mid, mc=mc, cb=cb, sb=sb):
                w = self.points[cand] - c[rows, None, :]
                ew = np.einsum("qkd,qd->qk", w, e[rows])
                rhs = 0.5 * (np.einsum("qkd,qkd->qk", w, w) - 2.0 * np.einsum("qkd,qd->qk", w, mc[rows]))
                valid = (cand >= 0) & (cand != cb[rows, None]) & (cand != sb[rows, None])
                upper = np.full(ew.shape, np.inf)
                lower = np.full(ew.shape, -np.inf)
                np.divide(rhs, ew, out=upper, where=valid & (ew > 0))
                np.divide(rhs, ew, out=lower, where=valid & (ew < 0))
                s_hi = upper.min(axis=1)
                s_lo = lower.max(axis=1)
                p = mid[rows] + s_lo[:, None] * e[rows]
                q = mid[rows] + s_hi[:, None] * e[rows]
                with np.errstate(invalid="ignore"):
                    reach = np.maximum(np.linalg.norm(p - c[rows], axis=1), np.linalg.norm(q - c[rows], axis=1))
                reach = np.where(np.isfinite(reach), reach, np.inf)
                return (p, q), 2.0 * reach

            if len(cb):
                p, q = self._expand(c, 2, evaluate)
                p_out[start:start + CHUNK] = p
                q_out[start:start + CHUNK] = q
        return p_out, q_out

    def within(self, center: np.ndarray, radius: float) -> np.ndarray:
        """Alle Kernindizes mit Abstand <= radius zu ``center``"""
        center = np.asarray(center, dtype=float).reshape(1, self.dimension)
        ring = max(1, int(math.ceil(radius / self.side)))
        if self._exhaustive(ring):
            cand = np.arange(len(self.points))
        else:
            cand = self._gather(self._cells(center), ring)[0]
            cand = cand[cand >= 0]
        dist = np.linalg.norm(self.points[cand] - center, axis=1)
        return np.sort(cand[dist <= radius])


_INDEX_CACHE: "weakref.WeakKeyDictionary[NucleusSet, GridIndex]" = weakref.WeakKeyDictionary()
_INDEX_LOCK = threading.Lock()


def index_for(nuclei: NucleusSet) -> GridIndex:
    """Gitterindex einer Kernmenge (einmal gebaut, danach geteilt)"""
    with _INDEX_LOCK:
        index = _INDEX_CACHE.get(nuclei)
        if index is None:
            index = GridIndex.for_set(nuclei)
            _INDEX_CACHE[nuclei] = index
        return index


# ===== SIMPLEX =====

@dataclass(frozen=True, eq=False)
class SimplexRef:
    """Affines Stück über x: Kern c, Sekundärkern c′ und Außenfacette"""

    generation: int
    nucleus_index: int
    secondary_index: int
    nucleus: np.ndarray
    secondary: np.ndarray
    facet: np.ndarray

    def __post_init__(self):
        if self.nucleus_index == self.secondary_index:
            raise ParameterError("c und c′ müssen verschieden sein")

    @property
    def normal(self) -> np.ndarray:
        """Einheitsnormale (c′−c)/‖c′−c‖ der Mittelsenkrechten"""
        d = self.secondary - self.nucleus
        return d / np.linalg.norm(d)

    @property
    def offset(self) -> float:
        """Abstand der Mittelsenkrechten H_{c,c′} vom Ursprung entlang der Normale"""
        return float(np.dot(0.5 * (self.nucleus + self.secondary), self.normal))

    def clearance(self, x) -> float:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        c = self.nucleus[None, :]
        c2 = self.secondary[None, :]
        if x.shape[1] == 1:
            return float(simplex_clearance(x, c, c2)[0])
        return float(simplex_clearance(x, c, c2, self.facet[0][None, :], self.facet[1][None, :])[0])


# ===== ÖFFENTLICHE OPERATIONEN =====

def nearest_nucleus(nuclei: NucleusSet, x) -> Tuple[int, float]:
    """
    Nächster Kern zu x

    Returns:
        (Index, Abstand); bei Gleichstand der kleinste Index
    """
    if len(nuclei) == 0:
        raise StateError("Nächster Kern einer leeren Menge ist undefiniert")
    idx, dist = index_for(nuclei).nearest(_as_points(x, nuclei.dimension))
    return int(idx[0]), float(dist[0])


def secondary_nucleus(nuclei: NucleusSet, c_index: int, x) -> int:
    """Kern der Nachbarzelle in Richtung des Strahls [c, x)"""
    xs = _as_points(x, nuclei.dimension)
    if np.array_equal(xs[0], nuclei.points[c_index]):
        raise ParameterError("Sekundärkern ist im Kern selbst undefiniert")
    s = index_for(nuclei).secondary(xs, np.array([c_index]))[0]
    if s == NO_INDEX:
        raise UnboundedDirectionError(f"Strahl vom Kern {c_index} kreuzt keine Mittelsenkrechte")
    return int(s)


def simplex_ref(nuclei: NucleusSet, x) -> SimplexRef:
    """Identifiziere den Simplex Conv({c} ∪ f), der x enthält"""
    c_index, dist = nearest_nucleus(nuclei, x)
    if dist == 0:
        raise ParameterError("x liegt auf einem Kern; Simplex ist nicht eindeutig")
    s_index = secondary_nucleus(nuclei, c_index, x)
    c = nuclei.points[c_index].copy()
    c2 = nuclei.points[s_index].copy()
    if nuclei.dimension == 1:
        facet = (0.5 * (c + c2))[None, :]
    else:
        p, q = index_for(nuclei).facets(np.array([c_index]), np.array([s_index]))
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise UnboundedCellError(f"Kante zwischen {c_index} und {s_index} ist unbeschränkt")
        facet = np.vstack([p[0], q[0]])
    return SimplexRef(generation=nuclei.generation, nucleus_index=c_index, secondary_index=s_index,
                      nucleus=c, secondary=c2, facet=facet)


def oscillation_set_membership(nuclei: NucleusSet, x, radius: float) -> bool:
    """Liegt die abgeschlossene Kugel B_radius(x) im Simplex von x?"""
    if radius < 0:
        raise ParameterError("Radius muss >= 0 sein")
    _, dist = nearest_nucleus(nuclei, x)
    if dist == 0:
        # Kerne liegen auf dem Skelett
        return radius <= 0
    return simplex_ref(nuclei, x).clearance(x) >= radius


# ----- vektorisierte Varianten -----

def nearest_many(nuclei: NucleusSet, xs) -> Tuple[np.ndarray, np.ndarray]:
    """Nächste Kerne für viele Punkte"""
    if len(nuclei) == 0:
        raise StateError("Nächster Kern einer leeren Menge ist undefiniert")
    return index_for(nuclei).nearest(_as_points(xs, nuclei.dimension))


def resolve_many(nuclei: NucleusSet, xs) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Kern und Sekundärkern für viele Punkte

    Returns:
        (c_idx, s_idx, at_nucleus); s_idx ist NO_INDEX auf Kernen und bei
        unbeschränkter Richtung
    """
    xs = _as_points(xs, nuclei.dimension)
    c_idx, dist = nearest_many(nuclei, xs)
    at_nucleus = dist == 0
    s_idx = np.full(len(xs), NO_INDEX, dtype=np.int64)
    off = ~at_nucleus
    if np.any(off):
        s_idx[off] = index_for(nuclei).secondary(xs[off], c_idx[off])
    return c_idx, s_idx, at_nucleus


def clearance_many(nuclei: NucleusSet, xs) -> np.ndarray:
    """Facettenabstand für viele Punkte (0 auf Kernen)"""
    xs = _as_points(xs, nuclei.dimension)
    c_idx, s_idx, at_nucleus = resolve_many(nuclei, xs)
    unbounded = (~at_nucleus) & (s_idx == NO_INDEX)
    if np.any(unbounded):
        raise UnboundedDirectionError(f"{int(unbounded.sum())} Punkte ohne Sekundärkern")
    out = np.zeros(len(xs))
    off = ~at_nucleus
    if not np.any(off):
        return out
    c = nuclei.points[c_idx[off]]
    c2 = nuclei.points[s_idx[off]]
    if nuclei.dimension == 1:
        out[off] = simplex_clearance(xs[off], c, c2)
        return out
    p, q = index_for(nuclei).facets(c_idx[off], s_idx[off])
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise UnboundedCellError("Außenkante unbeschränkt")
    out[off] = simplex_clearance(xs[off], c, c2, p, q)
    return out


# ===== ZELLPOLYGON (D=2) =====

@dataclass(frozen=True, eq=False)
class CellPolygon:
    """Konvexe Voronoi-Zelle, Ecken gegen den Uhrzeigersinn"""

    nucleus_index: int
    nucleus: np.ndarray
    vertices: np.ndarray
    neighbors: Tuple[int, ...]

    def __post_init__(self):
        if len(self.vertices) < 3 or len(self.neighbors) != len(self.vertices):
            raise ParameterError("Zellpolygon braucht >= 3 Ecken und einen Nachbarn pro Kante")

    def area(self) -> float:
        v = self.vertices
        return 0.5 * float(np.sum(_cross(v, np.roll(v, -1, axis=0))))

    def triangles(self) -> List[np.ndarray]:
        """Dreiecke (c, v_i, v_{i+1}) der Simplex-Zerlegung"""
        v = self.vertices
        return [np.vstack([self.nucleus, v[i], v[(i + 1) % len(v)]]) for i in range(len(v))]

    def edge_to(self, neighbor: int) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        for i, label in enumerate(self.neighbors):
            if label == neighbor:
                return self.vertices[i], self.vertices[(i + 1) % len(self.vertices)]
        return None


def _clip_half_plane(vertices: np.ndarray, labels: List[int], normal: np.ndarray,
                     bound: float, label: int) -> Tuple[np.ndarray, List[int]]:
    """Schneide Polygon mit {y: ⟨y, normal⟩ ≤ bound}; Kantenlabels wandern mit"""
    signed = vertices @ normal - bound
    out_v, out_l = [], []
    n = len(vertices)
    for i in range(n):
        j = (i + 1) % n
        sp, sq = signed[i], signed[j]
        if sp <= 0:
            out_v.append(vertices[i])
            out_l.append(labels[i])
            if sq > 0:
                out_v.append(vertices[i] + (vertices[j] - vertices[i]) * (sp / (sp - sq)))
                out_l.append(label)
        elif sq <= 0:
            out_v.append(vertices[i] + (vertices[j] - vertices[i]) * (sp / (sp - sq)))
            out_l.append(labels[i])
    if not out_v:
        return np.zeros((0, 2)), []
    return np.array(out_v), out_l


def _drop_repeated(vertices: np.ndarray, labels: List[int], scale: float) -> Tuple[np.ndarray, List[int]]:
    keep = np.linalg.norm(np.roll(vertices, -1, axis=0) - vertices, axis=1) > 1e-12 * scale
    return vertices[keep], [l for l, k in zip(labels, keep) if k]


def cell_polygon(nuclei: NucleusSet, c_index: int, clip_to_window: bool = False) -> CellPolygon:
    """
    Voronoi-Zelle C_c als Schnitt der Halbebenen {y: ‖y−c‖ ≤ ‖y−z‖}

    Args:
        nuclei: Kerne (nur D=2)
        c_index: Index des Kerns
        clip_to_window: Fensterkanten zulassen (Nachbar -1) statt Fehler

    Returns:
        CellPolygon mit Nachbarkern pro Kante
    """
    if nuclei.dimension != 2:
        raise ParameterError("cell_polygon ist nur für D=2 definiert")
    index = index_for(nuclei)
    c = nuclei.points[c_index]
    lo, hi = (np.asarray(b, dtype=float) for b in nuclei.window.inflated())
    box = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    scale = float(np.linalg.norm(hi - lo))
    radius = 4.0 * index.side

    while True:
        cand = index.within(c, radius)
        cand = cand[cand != c_index]
        dist = np.linalg.norm(nuclei.points[cand] - c, axis=1)
        cand = cand[np.lexsort((cand, dist))]
        dist = np.sort(dist)
        vertices, labels = box.copy(), [NO_INDEX] * 4
        for z, dz in zip(cand, dist):
            reach = np.max(np.linalg.norm(vertices - c, axis=1))
            if dz > 2.0 * reach:
                break
            w = nuclei.points[z] - c
            bound = 0.5 * (np.dot(nuclei.points[z], nuclei.points[z]) - np.dot(c, c))
            vertices, labels = _clip_half_plane(vertices, labels, w, bound, int(z))
            vertices, labels = _drop_repeated(vertices, labels, scale)
        reach = np.max(np.linalg.norm(vertices - c, axis=1))
        if 2.0 * reach <= radius or radius >= scale:
            break
        radius = max(2.0 * reach, 2.0 * radius)

    if not clip_to_window and NO_INDEX in labels:
        raise UnboundedCellError(f"Zelle {c_index} ist im Fenster unbeschränkt")
    return CellPolygon(nucleus_index=int(c_index), nucleus=c.copy(), vertices=vertices,
                       neighbors=tuple(int(l) for l in labels))


# ===== BATCH-ABFRAGEN (viele unabhängige Realisierungen) =====

@dataclass(frozen=True)
class BatchSimplices:
    """Simplex-Daten pro Versuch; ungültige Versuche haben valid=False"""

    nucleus: np.ndarray
    secondary: np.ndarray
    facet_p: Optional[np.ndarray]
    facet_q: Optional[np.ndarray]
    valid: np.ndarray
    at_nucleus: np.ndarray


def _group_first(keys: np.ndarray, owners: np.ndarray, uniq: np.ndarray) -> np.ndarray:
    """Position des kleinsten Schlüssels je Versuch (Gleichstand: erste Position)"""
    order = np.lexsort((np.arange(len(keys)), keys, owners))
    return order[np.searchsorted(owners[order], uniq)]


def batch_nearest_distance(batch: PoissonBatch, x) -> np.ndarray:
    """Abstand von x zum nächsten Kern je Versuch (inf ohne Punkte)"""
    x = np.asarray(x, dtype=float).reshape(batch.dimension)
    out = np.full(batch.trials, np.inf)
    if len(batch.owners) == 0:
        return out
    uniq, starts = np.unique(batch.owners, return_index=True)
    dist = np.linalg.norm(batch.points - x, axis=1)
    out[uniq] = np.minimum.reduceat(dist, starts)
    return out


def batch_simplices(batch: PoissonBatch, x) -> BatchSimplices:
    """Kern, Sekundärkern und Außenkante von x in jedem Versuch (Brute Force)"""
    dim = batch.dimension
    x = np.asarray(x, dtype=float).reshape(dim)
    trials = batch.trials
    nucleus = np.full((trials, dim), np.nan)
    secondary = np.full((trials, dim), np.nan)
    valid = np.zeros(trials, dtype=bool)
    at_nucleus = np.zeros(trials, dtype=bool)
    facet_p = np.full((trials, dim), np.nan) if dim == 2 else None
    facet_q = np.full((trials, dim), np.nan) if dim == 2 else None
    owners, points = batch.owners, batch.points
    if len(owners) == 0:
        return BatchSimplices(nucleus, secondary, facet_p, facet_q, valid, at_nucleus)

    uniq, starts = np.unique(owners, return_index=True)
    group = np.searchsorted(uniq, owners)
    d2 = np.sum((points - x) ** 2, axis=1)
    c_pos = _group_first(d2, owners, uniq)
    c = points[c_pos]
    hit = d2[c_pos] == 0

    u = x - c
    with np.errstate(invalid="ignore", divide="ignore"):
        u = u / np.linalg.norm(u, axis=1, keepdims=True)
    w = points - c[group]
    proj = np.sum(w * u[group], axis=1)
    usable = (proj > 0) & (np.arange(len(points)) != c_pos[group])
    t = np.full(len(points), np.inf)
    np.divide(np.sum(w * w, axis=1), 2.0 * proj, out=t, where=usable)
    s_pos = _group_first(t, owners, uniq)
    found = np.isfinite(t[s_pos]) & ~hit
    c2 = points[s_pos]

    nucleus[uniq] = c
    secondary[uniq] = np.where(found[:, None], c2, np.nan)
    at_nucleus[uniq] = hit
    group_valid = found.copy()

    if dim == 2:
        d = c2 - c
        with np.errstate(invalid="ignore", divide="ignore"):
            normal = d / np.linalg.norm(d, axis=1, keepdims=True)
        e = np.stack([-normal[:, 1], normal[:, 0]], axis=1)
        mid = c + 0.5 * d
        ew = np.sum(w * e[group], axis=1)
        rhs = 0.5 * (np.sum(w * w, axis=1) - 2.0 * np.sum(w * (mid - c)[group], axis=1))
        positions = np.arange(len(points))
        other = (positions != c_pos[group]) & (positions != s_pos[group])
        upper = np.full(len(points), np.inf)
        lower = np.full(len(points), -np.inf)
        np.divide(rhs, ew, out=upper, where=other & (ew > 0))
        np.divide(rhs, ew, out=lower, where=other & (ew < 0))
        s_hi = np.minimum.reduceat(upper, starts)
        s_lo = np.maximum.reduceat(lower, starts)
        bounded = np.isfinite(s_hi) & np.isfinite(s_lo)
        group_valid &= bounded
        facet_p[uniq] = mid + s_lo[:, None] * e
        facet_q[uniq] = mid + s_hi[:, None] * e

    valid[uniq] = group_valid
    dropped = int(len(uniq) - group_valid.sum() - hit.sum())
    if dropped:
        logger.debug("%d Versuche ohne beschränkten Simplex verworfen", dropped)
    return BatchSimplices(nucleus, secondary, facet_p, facet_q, valid, at_nucleus)


def batch_clearance(simplices: BatchSimplices, x) -> np.ndarray:
    """Facettenabstand von x je Versuch (NaN bei ungültigen Versuchen, 0 auf Kernen)"""
    dim = simplices.nucleus.shape[1]
    x = np.asarray(x, dtype=float).reshape(1, dim)
    out = np.full(len(simplices.valid), np.nan)
    out[simplices.at_nucleus] = 0.0
    ok = simplices.valid
    if not np.any(ok):
        return out
    xs = np.repeat(x, int(ok.sum()), axis=0)
    if dim == 1:
        out[ok] = simplex_clearance(xs, simplices.nucleus[ok], simplices.secondary[ok])
    else:
        out[ok] = simplex_clearance(xs, simplices.nucleus[ok], simplices.secondary[ok],
                                    simplices.facet_p[ok], simplices.facet_q[ok])
    return out

"""Heteroclinic and homoclinic connection search between section manifolds.

An unstable manifold grid of one orbit and a stable manifold grid of
another (or the same) live on one section and one energy level, so a
transversal intersection of their curves is a trajectory asymptotic to
both orbits. The search decomposes each grid into layers, the return-
map images of the fundamental-domain annulus: layer N of the unstable
side spans parameters [D lam^(N-1), D lam^N] per sign, and the stable
side mirrors it under the inverse map. Because the map advances layer
indices one at a time, a crossing anywhere on the manifolds has an
image in one of the layer pairs (N, N) or (N, N-1), so only those are
scanned.

Within a layer pair the curves are polylines ordered by parameter, and
every pair of segments is tested for a planar crossing in projected
coordinates, a closed-form 2x2 solve per pair done in a compiled
all-pairs kernel. Segments spanning grid gaps or stretched far beyond
the local segment length (manifold discontinuities from close
encounters) are excluded first. Each surviving hit is refined by
alternating bisection on both curve parameters, evaluating the true
manifold points with the globalized series evaluator until the
parameter brackets or the 4-space mismatch are below tolerance.
"""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numba import njit, prange

from .exceptions import ApsidalError, DomainError, LostIntersectionError

log = logging.getLogger(__name__)

__all__ = [
    "Layer",
    "SegmentHit",
    "HeteroclinicSolution",
    "build_layers",
    "candidate_pairs",
    "segment_intersect",
    "scan_layer_pair",
    "refine_bisection",
    "search_connections",
    "solution_to_dict",
]

LAYER_SIDES = ("unstable_source", "stable_target")

#: segment-length outlier factor over the rolling median
DISCONTINUITY_FACTOR = 10.0

#: rolling-median window (previous segment lengths)
DISCONTINUITY_WINDOW = 20

#: relative parallelism threshold of the 2x2 segment solve
PARALLEL_TOL = 1e-14

#: parameter slack of the sub-segment test during refinement; without
#: it a crossing that lands on a midpoint within roundoff falls just
#: outside [0, 1] for all four sub-pairs and the bracket is lost
REFINE_SLACK = 1e-9


def default_projection(state: np.ndarray) -> np.ndarray:
    """Position-plane projection used for the segment scan."""
    return np.asarray(state, dtype=np.float64)[:2]


@dataclass(frozen=True)
class Layer:
    """One sign of the N-th return-map image of the fundamental annulus.

    points are the grid rows whose parameter falls in the layer's
    closed s-interval, still sorted by (k, s); boundary rows belong to
    both adjacent layers.
    """

    side: str
    N: int
    half: str                # "positive" or "negative"
    s_lo: float              # unsigned interval endpoints, s_lo < s_hi
    s_hi: float
    k: np.ndarray
    s: np.ndarray
    states: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return self.k.size


def build_layers(grid, domain: float, multiplier: float, n_max: int,
                 n_min: int = 1) -> list[Layer]:
    """Slice a manifold grid into per-sign parameter layers.

    Layer N covers unsigned parameters [domain*g**(N-1), domain*g**N]
    where g is the per-application parameter growth: the multiplier
    itself for an unstable grid, its reciprocal for a stable one
    (whose points spread under the inverse map). Endpoints are
    inclusive on both sides so boundary points appear in both
    neighboring layers, keeping the scanned polylines seamless.
    """
    if domain <= 0.0:
        raise DomainError("layer decomposition needs a positive domain")
    if multiplier <= 0.0 or multiplier == 1.0:
        raise DomainError(f"multiplier {multiplier} is not hyperbolic")
    unstable = grid.kind == "unstable"
    side = "unstable_source" if unstable else "stable_target"
    growth = multiplier if unstable else 1.0 / multiplier
    layers = []
    for N in range(n_min, n_max + 1):
        lo = domain * growth ** (N - 1)
        hi = domain * growth ** N
        for half, sign in (("positive", 1.0), ("negative", -1.0)):
            lo_s, hi_s = sorted((sign * lo, sign * hi))
            keep = (grid.s >= lo_s) & (grid.s <= hi_s)
            layers.append(Layer(side=side, N=N, half=half,
                                s_lo=lo, s_hi=hi,
                                k=grid.k[keep], s=grid.s[keep],
                                states=grid.states[keep],
                                valid=grid.valid[keep]))
    return layers


def candidate_pairs(n_max: int) -> list[tuple[int, int]]:
    """Layer index pairs that can carry an intersection image.

    The return map shifts the unstable index up and the stable index
    down together, so any crossing appears in some (N, N) or
    (N, N-1) pair; (1, 0) is dropped because stable layers start at 1.
    """
    if n_max < 1:
        raise DomainError(f"n_max must be at least 1, got {n_max}")
    pairs: list[tuple[int, int]] = []
    for N in range(1, n_max + 1):
        pairs.append((N, N))
        if N >= 2:
            pairs.append((N, N - 1))
    return pairs


def segment_intersect(x1, x2, y1, y2):
    """Crossing of two closed segments, or None.

    Solves x1 + (x2-x1)a = y1 + (y2-y1)b in closed form and accepts
    the hit when both parameters land in [0, 1]. The parallelism test
    compares the determinant against the product of the segment
    lengths, so it is invariant under the shrinking brackets of the
    refinement stage.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    d1 = x2 - x1
    d2 = y2 - y1
    det = d2[0] * d1[1] - d2[1] * d1[0]
    scale = math.sqrt(d1[0] * d1[0] + d1[1] * d1[1]) * \
        math.sqrt(d2[0] * d2[0] + d2[1] * d2[1])
    if abs(det) <= PARALLEL_TOL * max(scale, 1e-300):
        return None
    rhs = y1 - x1
    a = (d2[0] * rhs[1] - d2[1] * rhs[0]) / det
    b = (d1[0] * rhs[1] - d1[1] * rhs[0]) / det
    if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
        return None
    return float(a), float(b), x1 + a * d1


def _crosses_with_slack(x1, x2, y1, y2, slack: float = REFINE_SLACK) -> bool:
    """Segment crossing test with slightly widened parameter bounds.

    The widening covers the roundoff of the crossing parameters,
    which grows like eps * coordinate / (chord length * crossing
    angle) as the brackets shrink around a crossing that sits at a
    shared endpoint. Without it the terminal bisection steps reject
    every sub-pair.
    """
    d1 = x2 - x1
    d2 = y2 - y1
    det = d2[0] * d1[1] - d2[1] * d1[0]
    len1 = math.sqrt(d1[0] * d1[0] + d1[1] * d1[1])
    len2 = math.sqrt(d2[0] * d2[0] + d2[1] * d2[1])
    if abs(det) <= PARALLEL_TOL * max(len1 * len2, 1e-300):
        return False
    coord = max(abs(x1[0]), abs(x1[1]), abs(x2[0]), abs(x2[1]),
                abs(y1[0]), abs(y1[1]), abs(y2[0]), abs(y2[1]))
    eps_geom = 8.0 * np.finfo(np.float64).eps * coord * \
        (len1 + len2) / abs(det)
    tol = slack + eps_geom
    rhs = y1 - x1
    a = (d2[0] * rhs[1] - d2[1] * rhs[0]) / det
    b = (d1[0] * rhs[1] - d1[1] * rhs[0]) / det
    return -tol <= a <= 1.0 + tol and -tol <= b <= 1.0 + tol


@dataclass(frozen=True)
class SegmentHit:
    """One crossing of projected grid segments, with its brackets."""

    k1: int
    k2: int
    s1_lo: float
    s1_hi: float
    s2_lo: float
    s2_hi: float
    point2d: np.ndarray
    a: float
    b: float


@dataclass(frozen=True)
class HeteroclinicSolution:
    """A refined intersection of the two manifold curves."""

    k1: int
    s1: float
    k2: int
    s2: float
    state: np.ndarray
    residual: float
    layers: tuple[int, int]
    maps_to_target: int      # return-map steps from source to target side


def _polyline_segments(layer: Layer, projection) -> tuple[np.ndarray, ...]:
    """Filtered consecutive-point segments of one half-layer.

    Returns (P, Q, s_lo, s_hi, k) arrays, one row per kept segment.
    A segment joins neighbors in s within a fixed crossing index; it
    is dropped when an endpoint is an invalid gap marker or when its
    projected length exceeds DISCONTINUITY_FACTOR times the rolling
    median of the previous DISCONTINUITY_WINDOW segment lengths.
    """
    P, Q, s_lo, s_hi, kk = [], [], [], [], []
    for k in np.unique(layer.k):
        rows = np.nonzero(layer.k == k)[0]
        if rows.size < 2:
            continue
        pts = [projection(layer.states[i]) for i in rows]
        window: list[float] = []
        for t in range(rows.size - 1):
            a, b = rows[t], rows[t + 1]
            pa, pb = pts[t], pts[t + 1]
            length = float(np.hypot(*(pb - pa)))
            keep = bool(layer.valid[a] and layer.valid[b])
            if keep and window:
                keep = length <= DISCONTINUITY_FACTOR * \
                    statistics.median(window)
            if math.isfinite(length):
                window.append(length)
                if len(window) > DISCONTINUITY_WINDOW:
                    window.pop(0)
            if not keep:
                continue
            P.append(pa)
            Q.append(pb)
            s_lo.append(layer.s[a])
            s_hi.append(layer.s[b])
            kk.append(k)
    if not P:
        empty2 = np.empty((0, 2))
        empty1 = np.empty(0)
        return empty2, empty2.copy(), empty1, empty1.copy(), \
            np.empty(0, dtype=np.int64)
    return (np.asarray(P), np.asarray(Q), np.asarray(s_lo),
            np.asarray(s_hi), np.asarray(kk, dtype=np.int64))


@njit(cache=True, parallel=True)
def _scan_kernel(P1, Q1, P2, Q2, tol):
    """All-pairs segment crossing test; returns flat hit arrays.

    Two passes so the parallel loop writes into preallocated slots:
    count hits per source segment, prefix-sum, then fill.
    """
    n1 = P1.shape[0]
    n2 = P2.shape[0]
    counts = np.zeros(n1 + 1, dtype=np.int64)
    for i in prange(n1):
        d1x = Q1[i, 0] - P1[i, 0]
        d1y = Q1[i, 1] - P1[i, 1]
        l1 = math.sqrt(d1x * d1x + d1y * d1y)
        c = 0
        for j in range(n2):
            d2x = Q2[j, 0] - P2[j, 0]
            d2y = Q2[j, 1] - P2[j, 1]
            det = d2x * d1y - d2y * d1x
            l2 = math.sqrt(d2x * d2x + d2y * d2y)
            scale = l1 * l2
            if scale < 1e-300:
                scale = 1e-300
            if abs(det) <= tol * scale:
                continue
            rx = P2[j, 0] - P1[i, 0]
            ry = P2[j, 1] - P1[i, 1]
            a = (d2x * ry - d2y * rx) / det
            b = (d1x * ry - d1y * rx) / det
            if 0.0 <= a <= 1.0 and 0.0 <= b <= 1.0:
                c += 1
        counts[i + 1] = c
    offsets = np.cumsum(counts)
    total = offsets[n1]
    out_i = np.empty(total, dtype=np.int64)
    out_j = np.empty(total, dtype=np.int64)
    out_a = np.empty(total)
    out_b = np.empty(total)
    for i in prange(n1):
        d1x = Q1[i, 0] - P1[i, 0]
        d1y = Q1[i, 1] - P1[i, 1]
        l1 = math.sqrt(d1x * d1x + d1y * d1y)
        pos = offsets[i]
        for j in range(n2):
            d2x = Q2[j, 0] - P2[j, 0]
            d2y = Q2[j, 1] - P2[j, 1]
            det = d2x * d1y - d2y * d1x
            l2 = math.sqrt(d2x * d2x + d2y * d2y)
            scale = l1 * l2
            if scale < 1e-300:
                scale = 1e-300
            if abs(det) <= tol * scale:
                continue
            rx = P2[j, 0] - P1[i, 0]
            ry = P2[j, 1] - P1[i, 1]
            a = (d2x * ry - d2y * rx) / det
            b = (d1x * ry - d1y * rx) / det
            if 0.0 <= a <= 1.0 and 0.0 <= b <= 1.0:
                out_i[pos] = i
                out_j[pos] = j
                out_a[pos] = a
                out_b[pos] = b
                pos += 1
    return out_i, out_j, out_a, out_b


def scan_layer_pair(source: Sequence[Layer], target: Sequence[Layer],
                    projection: Callable[[np.ndarray], np.ndarray]
                    = default_projection,
                    brute_force: bool = False) -> list[SegmentHit]:
    """Every projected crossing between two layers' filtered polylines.

    source and target are the half-layers of one (N, M) candidate
    pair. Disjoint bounding boxes return immediately; otherwise the
    all-pairs kernel (or a plain double loop for oracle comparisons)
    reports each crossing with the parameter brackets of both
    segments. Hits are de-duplicated by bracket and ordered by
    (k1, s1_lo, k2, s2_lo).
    """
    segs1 = [_polyline_segments(la, projection) for la in source]
    segs2 = [_polyline_segments(la, projection) for la in target]

    def stack(parts, idx):
        return np.concatenate([p[idx] for p in parts]) if parts else None

    P1, Q1 = stack(segs1, 0), stack(segs1, 1)
    P2, Q2 = stack(segs2, 0), stack(segs2, 1)
    if P1 is None or P2 is None or P1.shape[0] == 0 or P2.shape[0] == 0:
        return []
    s1_lo, s1_hi, k1 = stack(segs1, 2), stack(segs1, 3), stack(segs1, 4)
    s2_lo, s2_hi, k2 = stack(segs2, 2), stack(segs2, 3), stack(segs2, 4)

    lo1 = np.minimum(P1, Q1).min(axis=0)
    hi1 = np.maximum(P1, Q1).max(axis=0)
    lo2 = np.minimum(P2, Q2).min(axis=0)
    hi2 = np.maximum(P2, Q2).max(axis=0)
    if np.any(hi1 < lo2) or np.any(hi2 < lo1):
        return []

    if brute_force:
        raw = []
        for i in range(P1.shape[0]):
            for j in range(P2.shape[0]):
                res = segment_intersect(P1[i], Q1[i], P2[j], Q2[j])
                if res is not None:
                    raw.append((i, j, res[0], res[1]))
    else:
        ii, jj, aa, bb = _scan_kernel(P1, Q1, P2, Q2, PARALLEL_TOL)
        raw = list(zip(ii.tolist(), jj.tolist(), aa.tolist(), bb.tolist()))

    hits = []
    seen = set()
    for i, j, a, b in raw:
        key = (int(k1[i]), float(s1_lo[i]), float(s1_hi[i]),
               int(k2[j]), float(s2_lo[j]), float(s2_hi[j]))
        if key in seen:
            continue
        seen.add(key)
        point = P1[i] + a * (Q1[i] - P1[i])
        hits.append(SegmentHit(k1=int(k1[i]), k2=int(k2[j]),
                               s1_lo=float(s1_lo[i]), s1_hi=float(s1_hi[i]),
                               s2_lo=float(s2_lo[j]), s2_hi=float(s2_hi[j]),
                               point2d=point, a=float(a), b=float(b)))
    hits.sort(key=lambda h: (h.k1, h.s1_lo, h.k2, h.s2_lo))
    return hits


def refine_bisection(hit: SegmentHit,
                     eval_source: Callable[[int, float], np.ndarray],
                     eval_target: Callable[[int, float], np.ndarray],
                     tol_s: float = 1e-12, tol_residual: float = 1e-9,
                     projection: Callable[[np.ndarray], np.ndarray]
                     = default_projection,
                     layers: tuple[int, int] = (0, 0),
                     max_iter: int = 200) -> HeteroclinicSolution:
    """Shrink a segment hit onto the true curve intersection.

    Both parameter brackets are halved at their midpoints each
    iteration; of the four sub-segment pairs spanned by the midpoint
    evaluations, the one still crossing in projection becomes the new
    bracket pair. The crossing indices never change. Stops when both
    brackets are below tol_s relative to the parameter size or the
    4-space distance between the midpoint evaluations is below
    tol_residual; raises LostIntersectionError when no sub-pair
    crosses (tangency or a spurious chord hit).
    """
    a1, b1 = hit.s1_lo, hit.s1_hi
    a2, b2 = hit.s2_lo, hit.s2_hi
    w_a1 = eval_source(hit.k1, a1)
    w_b1 = eval_source(hit.k1, b1)
    w_a2 = eval_target(hit.k2, a2)
    w_b2 = eval_target(hit.k2, b2)

    best: tuple[float, float, float, np.ndarray] | None = None
    for _ in range(max_iter):
        c1 = 0.5 * (a1 + b1)
        c2 = 0.5 * (a2 + b2)
        w_c1 = eval_source(hit.k1, c1)
        w_c2 = eval_target(hit.k2, c2)
        residual = float(np.linalg.norm(w_c1 - w_c2))
        if best is None or residual < best[0]:
            best = (residual, c1, c2, w_c1)
        if residual < tol_residual:
            break

        p_a1, p_c1, p_b1 = (projection(w) for w in (w_a1, w_c1, w_b1))
        p_a2, p_c2, p_b2 = (projection(w) for w in (w_a2, w_c2, w_b2))
        found = None
        for lo1, hi1, plo1, phi1, wlo1, whi1 in (
                (a1, c1, p_a1, p_c1, w_a1, w_c1),
                (c1, b1, p_c1, p_b1, w_c1, w_b1)):
            for lo2, hi2, plo2, phi2, wlo2, whi2 in (
                    (a2, c2, p_a2, p_c2, w_a2, w_c2),
                    (c2, b2, p_c2, p_b2, w_c2, w_b2)):
                if _crosses_with_slack(plo1, phi1, plo2, phi2):
                    found = (lo1, hi1, wlo1, whi1, lo2, hi2, wlo2, whi2)
                    break
            if found:
                break
        if found is None:
            raise LostIntersectionError(
                f"no sub-segment pair crosses near (k1={hit.k1}, "
                f"s1~{c1:.6g}, k2={hit.k2}, s2~{c2:.6g}); residual "
                f"reached {residual:.3e}")
        a1, b1, w_a1, w_b1, a2, b2, w_a2, w_b2 = found

        if (b1 - a1 <= tol_s * max(abs(a1), abs(b1)) and
                b2 - a2 <= tol_s * max(abs(a2), abs(b2))):
            c1 = 0.5 * (a1 + b1)
            c2 = 0.5 * (a2 + b2)
            w_c1 = eval_source(hit.k1, c1)
            w_c2 = eval_target(hit.k2, c2)
            residual = float(np.linalg.norm(w_c1 - w_c2))
            if best is None or residual < best[0]:
                best = (residual, c1, c2, w_c1)
            break

    residual, s1, s2, state = best
    return HeteroclinicSolution(k1=hit.k1, s1=s1, k2=hit.k2, s2=s2,
                                state=state, residual=residual,
                                layers=layers,
                                maps_to_target=layers[0] + layers[1])


def search_connections(source_grid, target_grid,
                       eval_source: Callable[[int, float], np.ndarray],
                       eval_target: Callable[[int, float], np.ndarray],
                       source_domain: float, source_multiplier: float,
                       target_domain: float, target_multiplier: float,
                       n_max: int,
                       tol_s: float = 1e-12, tol_residual: float = 1e-9,
                       projection: Callable[[np.ndarray], np.ndarray]
                       = default_projection,
                       include_fundamental: bool = False
                       ) -> tuple[list[HeteroclinicSolution], dict]:
    """Full layer-pair sweep: scan, refine, and report.

    Returns the refined solutions ordered by (layer pair, k1, s1) and
    a scan report with per-pair hit counts. Lost intersections are
    logged and counted, not raised. include_fundamental adds the
    (0, 0) pair for manifolds that already cross inside their
    fundamental domains.
    """
    if source_grid.kind != "unstable":
        raise DomainError("source grid must be an unstable manifold")
    if target_grid.kind != "stable":
        raise DomainError("target grid must be a stable manifold")
    n_min = 0 if include_fundamental else 1
    src_layers = build_layers(source_grid, source_domain,
                              source_multiplier, n_max, n_min=n_min)
    tgt_layers = build_layers(target_grid, target_domain,
                              target_multiplier, n_max, n_min=n_min)

    def pick(layers, N):
        return [la for la in layers if la.N == N]

    pairs = candidate_pairs(n_max)
    if include_fundamental:
        pairs = [(0, 0)] + pairs
    solutions = []
    report = {"pairs_scanned": 0, "hits": 0, "refined": 0, "lost": 0,
              "per_pair": {}}
    for N, M in pairs:
        hits = scan_layer_pair(pick(src_layers, N), pick(tgt_layers, M),
                               projection)
        report["pairs_scanned"] += 1
        report["hits"] += len(hits)
        report["per_pair"][f"({N},{M})"] = len(hits)
        for hit in hits:
            try:
                sol = refine_bisection(hit, eval_source, eval_target,
                                       tol_s=tol_s,
                                       tol_residual=tol_residual,
                                       projection=projection,
                                       layers=(N, M))
            except (LostIntersectionError, ApsidalError) as exc:
                # manifold evaluation can fail legitimately during
                # refinement when the mapped point threads a close
                # encounter and never reaches an accepted crossing
                log.info("dropped candidate in pair (%d,%d): %s", N, M, exc)
                report["lost"] += 1
                continue
            report["refined"] += 1
            solutions.append(sol)
    return solutions, report


def solution_to_dict(sol: HeteroclinicSolution) -> dict:
    return {
        "k1": sol.k1, "s1": sol.s1, "k2": sol.k2, "s2": sol.s2,
        "state": [float(v) for v in sol.state],
        "residual": sol.residual,
        "layers": list(sol.layers),
        "maps_to_target": sol.maps_to_target,
    }

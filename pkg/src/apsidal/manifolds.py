"""Taylor-series stable and unstable manifolds of section periodic orbits.

A hyperbolic periodic orbit of the return map carries one-dimensional
stable and unstable curves through each of its m section crossings. We
represent the corresponding flow manifolds by truncated power series

    W(k, s) = X(k) + W_1(k) s + W_2(k) s^2 + ... + W_degree(k) s^degree

in a scalar parameter s, one series of 4-vectors per crossing, chosen
so the flow over the crossing-to-crossing time tau(k) advances the
parameterization conjugate to a plain multiplication:

    flow_{tau(k)}( W(k, s) ) = W(k+1 mod m, lambda * s)

with lambda the mean per-crossing multiplier of the chosen bundle.
Matching Taylor coefficients of both sides turns this into one linear
cyclic system per order, diagonalized by the adapted frame: each frame
component of the unknown order-d coefficients satisfies a hyperbolic
circle equation with constant factor, solved by frames.solve_hyperbolic.
The order-d forcing term comes from jet transport of the series known
so far through the equations of motion.

The series is trustworthy on a finite parameter interval only. The
fundamental domain D is the largest radius on which the invariance
defect above stays below a tolerance, found by bisection with multi-
point sampling. Points beyond the domain are reached by pulling the
parameter back into it and re-applying the return map, which is also
how the manifold is globalized into a dense grid of section points for
the connection search.

Throughout, kind "unstable" grows under the forward return map and
"stable" under its inverse; both use forward-time series coefficients.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .exceptions import (ApsidalError, ConvergenceError,
                         DegenerateSeriesError, DomainError,
                         NonHyperbolicError, TangencyError)
from .frames import AdaptedFrame, solve_hyperbolic
from .integrate import (EventSpec, Tolerances, VectorField,
                        batch_integrate_to_event, flow_jet, integrate_time,
                        integrate_to_event)
from .jets import JetState
from .orbits import PeriodicOrbitData
from . import pcrtbp
from .pcrtbp import SystemModel

log = logging.getLogger(__name__)

__all__ = [
    "ManifoldSeries",
    "ManifoldGrid",
    "compute_parameterization",
    "choose_scale",
    "fundamental_domain",
    "domain_radius",
    "eval_W",
    "project_to_section",
    "globalize",
    "eval_Wp_global",
    "series_to_dict",
    "series_from_dict",
    "grid_to_rows",
    "write_grid_csv",
    "read_grid_csv",
]

#: invariance-defect tolerance defining the fundamental domain
DEFAULT_E_TOL = 1e-6

#: largest |sigma| a state may have and still be projected onto the section
NEAR_SECTION_BOUND = 0.5

#: default bisection bracket edge for the fundamental domain
DOMAIN_BRACKET = 10.0

#: relative accuracy of the fundamental-domain bisection
DOMAIN_REL_TOL = 1e-3

MANIFOLD_KINDS = ("stable", "unstable")


@dataclass(frozen=True)
class ManifoldSeries:
    """Per-crossing Taylor coefficients of one manifold branch.

    coeffs[k, d] is the order-d 4-vector coefficient of the series at
    crossing k; coeffs[k, 0] is the crossing itself and coeffs[k, 1]
    the scaled eigendirection. multiplier is the mean per-crossing
    stable or unstable multiplier the parameterization is conjugated
    to. domain stays 0 until fundamental_domain measures it.
    """

    kind: str
    degree: int
    coeffs: np.ndarray        # (m, degree+1, 4)
    multiplier: float
    scale: float
    e_tol: float = DEFAULT_E_TOL
    domain: float = 0.0

    def __post_init__(self):
        if self.kind not in MANIFOLD_KINDS:
            raise DomainError(f"manifold kind {self.kind!r} not one of "
                              f"{MANIFOLD_KINDS}")
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim != 3 or c.shape[1] != self.degree + 1 or c.shape[2] != 4:
            raise DomainError("coefficient array must have shape "
                              f"(m, degree+1, 4), got {c.shape}")
        object.__setattr__(self, "coeffs", c)

    @property
    def m(self) -> int:
        return self.coeffs.shape[0]

    def truncated(self, degree: int) -> "ManifoldSeries":
        """Drop orders above the given degree (domain reset to unknown)."""
        if degree < 1 or degree > self.degree:
            raise DomainError(f"cannot truncate degree-{self.degree} "
                              f"series to {degree}")
        return replace(self, degree=degree,
                       coeffs=self.coeffs[:, :degree + 1].copy(),
                       domain=0.0)


def eval_W(series: ManifoldSeries, k: int, s: float) -> np.ndarray:
    """Horner evaluation of the crossing-k series at parameter s."""
    c = series.coeffs[k % series.m]
    out = c[-1].copy()
    for d in range(series.degree - 1, -1, -1):
        out *= s
        out += c[d]
    return out


def _as_field(model) -> VectorField:
    """Accept a SystemModel or a bare VectorField."""
    return model.field() if isinstance(model, SystemModel) else model


def compute_parameterization(frame: AdaptedFrame,
                             orbit: PeriodicOrbitData,
                             kind: str, degree: int, scale: float = 1.0,
                             tol: Tolerances = Tolerances(),
                             verify: bool = True) -> ManifoldSeries:
    """Solve the conjugation equation order by order up to the degree.

    Orders 0 and 1 are the crossings themselves and the scaled
    eigendirections. For each higher order d, jet transport of the
    series known so far over each leg yields the order-d defect; its
    frame coordinates split into four scalar circle equations with
    factors multiplier**(-d) (twice), lambda_s*multiplier**(-d) and
    lambda_u*multiplier**(-d), never 1 for a hyperbolic orbit, so each
    has a unique solution. The tangent-component equation is solved
    last because the shear couples it to the conjugate component.

    With verify on, the finished series is flowed once more at full
    degree and every coefficient of the defect is required to vanish
    to 1e-9 relative to the largest coefficient (allowing for the
    multiplier**d growth the flow applies at order d, which limits the
    achievable absolute accuracy of the comparison).
    """
    if kind not in MANIFOLD_KINDS:
        raise DomainError(f"manifold kind {kind!r} not one of "
                          f"{MANIFOLD_KINDS}")
    if degree < 2:
        raise DomainError(f"series degree must be at least 2, got {degree}")
    if not scale > 0.0:
        raise DomainError(f"scale must be positive, got {scale}")
    if not orbit.hyperbolic:
        raise NonHyperbolicError("orbit has no hyperbolic bundle to expand")

    m = orbit.m
    lam = frame.lambda_u if kind == "unstable" else frame.lambda_s
    column = 3 if kind == "unstable" else 2
    field = orbit.model.field()

    coeffs = np.zeros((m, degree + 1, 4))
    coeffs[:, 0] = orbit.X
    coeffs[:, 1] = scale * frame.M[:, :, column]

    for d in range(2, degree + 1):
        shrink = lam ** (-d)
        known = float(np.max(np.abs(coeffs[:, :d])))
        settle = 1e-10 * max(1.0, lam ** d) * max(1.0, known)
        # the defect is re-measured with each solved increment in
        # place: the frame conjugation is only accurate to the frame
        # residual, which re-enters the defect scaled by the frame
        # coordinates of the correction, and one extra pass removes it
        for _ in range(4):
            defect = _order_defect(field, coeffs, d, orbit.tau, lam, tol)
            if not np.all(np.isfinite(defect)):
                raise ConvergenceError(
                    f"jet transport blew up at order {d}; the parameter "
                    "scale is too large for this bundle (see "
                    "choose_scale)")
            if float(np.max(np.abs(defect))) <= settle:
                break

            eta = np.empty((m, 4))
            for k in range(m):
                eta[k] = -frame.M_inv[(k + 1) % m] @ defect[k]

            # dividing the order-d conjugation equation by
            # multiplier**d exposes the constant-factor circle
            # equations; the tangent row needs the conjugate row's
            # solution first (shear coupling)
            V = np.empty((m, 4))
            V[:, 1] = solve_hyperbolic(shrink, shrink * eta[:, 1])
            V[:, 2] = solve_hyperbolic(frame.lambda_s * shrink,
                                       shrink * eta[:, 2])
            V[:, 3] = solve_hyperbolic(frame.lambda_u * shrink,
                                       shrink * eta[:, 3])
            V[:, 0] = solve_hyperbolic(
                shrink, shrink * (eta[:, 0] - frame.T_bar * V[:, 1]))
            for k in range(m):
                coeffs[k, d] += frame.M[k] @ V[k]

    series = ManifoldSeries(kind=kind, degree=degree, coeffs=coeffs,
                            multiplier=lam, scale=float(scale))
    if verify:
        _verify_orders(series, orbit, tol)
    return series


def _order_defect(field: VectorField, coeffs: np.ndarray, d: int,
                  tau: np.ndarray, lam: float,
                  tol: Tolerances) -> np.ndarray:
    """Order-d coefficients of the per-leg invariance mismatch.

    Flows each crossing's series truncated at degree d and subtracts
    the target, multiplier**d times the next crossing's order-d
    coefficient. On the first pass of an order that coefficient is
    still zero and the flowed top coefficient is the whole forcing.
    """
    m = coeffs.shape[0]
    out = np.empty((m, 4))
    for k in range(m):
        jet = JetState.from_polynomial(coeffs[k, :d + 1])
        flowed = flow_jet(field, jet, tau[k], tol=tol)
        out[k] = flowed.coeffs[:, d] - lam ** d * coeffs[(k + 1) % m, d]
    return out


def _verify_orders(series: ManifoldSeries, orbit: PeriodicOrbitData,
                   tol: Tolerances) -> None:
    """Re-derive every defect coefficient from the finished series.

    The order-d coefficient of the flowed series must match the next
    crossing's coefficient times multiplier**d. The comparison happens
    at the size the flow produces, multiplier**d times the coefficient
    scale, so the pass bound grows with it; demanding an absolute
    bound there would exceed double precision for expanding bundles.
    """
    field = orbit.model.field()
    lam = series.multiplier
    c_max = float(np.max(np.abs(series.coeffs)))
    worst = 0.0
    for k in range(series.m):
        flowed = flow_jet(field, JetState.from_polynomial(series.coeffs[k]),
                          orbit.tau[k], tol=tol)
        nxt = series.coeffs[(k + 1) % series.m]
        for d in range(series.degree + 1):
            gap = float(np.max(np.abs(flowed.coeffs[:, d] -
                                      nxt[d] * lam ** d)))
            allow = c_max * max(1.0, abs(lam) ** d)
            worst = max(worst, gap / allow)
            if gap > 1e-9 * allow:
                raise ConvergenceError(
                    f"order-{d} invariance defect {gap:.3e} at crossing "
                    f"{k} exceeds 1e-9 of the working size {allow:.3e}; "
                    "try a smaller parameter scale")
    log.debug("series verification: worst relative defect %.3e", worst)


def _growth_rate(norms: np.ndarray) -> float:
    """Geometric growth ratio fitted to per-order coefficient norms.

    norms[i] is the size of order i+2 (orders 0 and 1 are anchored by
    the orbit and the eigenvectors, so they carry no growth signal).
    Least-squares line through the log-norms; zero norms are skipped.
    """
    norms = np.asarray(norms, dtype=np.float64)
    orders = np.arange(2, norms.size + 2, dtype=np.float64)
    keep = norms > 0.0
    if np.count_nonzero(keep) < 2:
        return 1.0
    slope = np.polyfit(orders[keep], np.log(norms[keep]), 1)[0]
    return float(np.exp(slope))


def choose_scale(frame: AdaptedFrame, orbit: PeriodicOrbitData, kind: str,
                 probe_degree: int = 10,
                 tol: Tolerances = Tolerances()) -> float:
    """Parameter scale that flattens the coefficient growth.

    Runs a unit-scale probe expansion, fits the geometric growth rate
    of the coefficient norms over orders 2..probe_degree, and returns
    its reciprocal: substituting s -> alpha*s multiplies order d by
    alpha**d, so alpha = 1/rate rebalances the series to roughly
    unit growth. Falls back to 1 with a warning when the probe fails.
    """
    if probe_degree < 6:
        raise DomainError(f"probe degree must be at least 6, "
                          f"got {probe_degree}")
    try:
        probe = compute_parameterization(frame, orbit, kind, probe_degree,
                                         scale=1.0, tol=tol, verify=False)
    except ApsidalError as exc:
        log.warning("scale probe failed (%s); keeping scale 1", exc)
        return 1.0
    norms = np.array([
        float(np.max(np.linalg.norm(probe.coeffs[:, d], axis=1)))
        for d in range(2, probe_degree + 1)])
    if not np.all(np.isfinite(norms)):
        log.warning("scale probe produced non-finite coefficients; "
                    "keeping scale 1")
        return 1.0
    return 1.0 / _growth_rate(norms)


def domain_radius(err: Callable[[float], float], e_tol: float,
                  s_max: float = DOMAIN_BRACKET,
                  rel_tol: float = DOMAIN_REL_TOL) -> tuple[float, bool]:
    """Largest radius keeping a sampled error profile under tolerance.

    err(s) is a pointwise error; a radius passes when the error at
    both endpoints and 8 interior samples stays at or under e_tol (the
    sampling guards against non-monotone profiles). Bisects between 0
    and s_max to the relative tolerance. Returns (radius, True) when
    the whole bracket passes, and raises DegenerateSeriesError when
    even a 1e-8 radius fails.
    """
    def ok(r: float) -> bool:
        return all(err(float(s)) <= e_tol
                   for s in np.linspace(-r, r, 10))

    if ok(s_max):
        return float(s_max), True
    lo, hi = 0.0, float(s_max)
    for _ in range(200):
        if hi <= 1e-8:
            break
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
        if lo > 0.0 and hi - lo <= rel_tol * lo:
            return lo, False
    if lo < 1e-8:
        raise DegenerateSeriesError(
            f"invariance error exceeds {e_tol:.1e} for every radius "
            "down to 1e-8; the series carries no usable neighborhood")
    return lo, False


def fundamental_domain(series: ManifoldSeries, orbit: PeriodicOrbitData,
                       e_tol: float | None = None,
                       s_max: float = DOMAIN_BRACKET,
                       rel_tol: float = DOMAIN_REL_TOL,
                       tol: Tolerances = Tolerances()) -> float:
    """Parameter radius on which the series is flow-invariant to e_tol.

    Per crossing, the error at parameter s is the 4-space distance
    between the flow image of W(k, s) over tau(k) and the next
    crossing's series at multiplier*s; the returned domain is the
    smallest of the per-crossing bisection radii, so the invariance
    bound holds uniformly in k.
    """
    if e_tol is None:
        e_tol = series.e_tol
    field = orbit.model.field()
    lam = series.multiplier
    best = math.inf
    limited = True
    for k in range(series.m):
        nxt = (k + 1) % series.m

        def err(s: float, k: int = k, nxt: int = nxt) -> float:
            image = integrate_time(field, eval_W(series, k, s),
                                   orbit.tau[k], tol=tol)
            return float(np.linalg.norm(image - eval_W(series, nxt,
                                                       lam * s)))

        radius, at_edge = domain_radius(err, e_tol, s_max, rel_tol)
        limited = limited and at_edge
        best = min(best, radius)
    if limited:
        log.info("fundamental domain hit the bracket edge %g; the true "
                 "domain may be larger", s_max)
    return float(best)


def project_to_section(model, section: EventSpec, state: np.ndarray,
                       max_time: float = 2.0 * math.pi,
                       near_bound: float = NEAR_SECTION_BOUND,
                       tol: Tolerances = Tolerances()) -> np.ndarray:
    """Carry a near-section state to its natural section crossing.

    States already on the section (|sigma| <= 1e-12) come back
    unchanged. Otherwise the flow direction is chosen so sigma moves
    toward zero along it (forward when sigma and its forward rate have
    opposite signs, backward otherwise) and the first crossing passing
    the section's direction and anomaly tests is returned. model may
    be a SystemModel or any VectorField, which keeps the operation
    testable on reference fields.
    """
    state = np.asarray(state, dtype=np.float64)
    field = _as_field(model)
    sigma = section.sigma(state)
    if abs(sigma) > near_bound:
        raise DomainError(f"state is too far from the section "
                          f"(|sigma| = {abs(sigma):.3e} > {near_bound})")
    if abs(sigma) <= 1e-12:
        return state.copy()
    rate = section.sigma_dot(state, field)
    if rate == 0.0:
        raise TangencyError("section function is stationary here; "
                            "projection direction undefined")
    forward = sigma * rate < 0.0
    hop = replace(section, eps_exclude=0.0, max_time=float(max_time))
    rec = integrate_to_event(field, state, hop, forward=forward, tol=tol)
    return rec.state


@dataclass(frozen=True)
class ManifoldGrid:
    """Globalized manifold points on the section, sorted by (k, s).

    Rows tagged valid=False mark continuation failures (typically
    close encounters with the secondary); their states are NaN and
    they serve as gap markers for the segment filters downstream.
    """

    kind: str
    section: str
    provenance: str
    k: np.ndarray        # (n,) crossing index of each point
    s: np.ndarray        # (n,) manifold parameter
    N: np.ndarray        # (n,) return-map applications from the domain
    states: np.ndarray   # (n, 4)
    valid: np.ndarray    # (n,) bool

    def __len__(self) -> int:
        return self.k.size

    def sorted(self) -> "ManifoldGrid":
        order = np.lexsort((self.N, self.s, self.k))
        return ManifoldGrid(kind=self.kind, section=self.section,
                            provenance=self.provenance,
                            k=self.k[order], s=self.s[order],
                            N=self.N[order], states=self.states[order],
                            valid=self.valid[order])


def globalize(series: ManifoldSeries, model: SystemModel,
              section: EventSpec, m_grid: int = 1000, n_max: int = 8,
              tol: Tolerances = Tolerances(),
              section_name: str = "", provenance: str = "") -> ManifoldGrid:
    """Sweep the fundamental domain onto the section and iterate out.

    Seeds m_grid parameters per sign, evenly spaced over [-D, D] at
    every crossing, projects each series point onto the section, then
    re-applies the return map (its inverse for stable manifolds) up to
    n_max times. Each image keeps its intrinsic tag: crossing index
    shifted by the number of applications and parameter multiplied by
    the corresponding multiplier power, exactly the bookkeeping the
    conjugation equation prescribes. Integration failures become
    invalid gap rows and end that seed's chain.
    """
    if series.domain <= 0.0:
        raise DomainError("series has no measured fundamental domain; "
                          "run fundamental_domain first")
    if m_grid < 1:
        raise DomainError(f"m_grid must be positive, got {m_grid}")
    field = model.field()
    m = series.m
    lam = series.multiplier
    unstable = series.kind == "unstable"
    # per-application parameter growth: the return map advances the
    # unstable parameter by lam > 1; its inverse divides the stable
    # parameter by lam < 1
    growth = lam if unstable else 1.0 / lam
    shift = 1 if unstable else -1

    base = np.linspace(-series.domain, series.domain, 2 * m_grid + 1)
    base = base[base != 0.0]
    n_seed = base.size

    k0 = np.repeat(np.arange(m), n_seed)
    s0 = np.tile(base, m)
    seeds = np.empty((k0.size, 4))
    for i in range(k0.size):
        seeds[i] = eval_W(series, int(k0[i]), float(s0[i]))

    rows_k: list[np.ndarray] = []
    rows_s: list[np.ndarray] = []
    rows_N: list[np.ndarray] = []
    rows_state: list[np.ndarray] = []
    rows_valid: list[np.ndarray] = []

    def emit(kk, ss, NN, states, good):
        rows_k.append(kk.astype(np.int64))
        rows_s.append(ss.astype(np.float64))
        rows_N.append(np.full(kk.size, NN, dtype=np.int64))
        out = np.array(states, dtype=np.float64, copy=True)
        out[~good] = np.nan
        rows_state.append(out)
        rows_valid.append(np.asarray(good, dtype=bool))

    states, good = _project_batch(field, section, seeds, tol)
    emit(k0, s0, 0, states, good)
    if not np.any(good):
        raise DomainError("no fundamental-domain seed reached the "
                          "section; the grid cannot be built")

    alive = good.copy()
    current = states
    for depth in range(1, n_max + 1):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        statuses, _, images, _, _ = batch_integrate_to_event(
            field, current[idx], section, forward=unstable, tol=tol)
        ok = statuses == 0
        kk = (k0[idx] + shift * depth) % m
        ss = s0[idx] * growth ** depth
        emit(kk, ss, depth, images, ok)
        alive[idx[~ok]] = False
        nxt = np.array(current, copy=True)
        nxt[idx[ok]] = images[ok]
        current = nxt

    grid = ManifoldGrid(
        kind=series.kind, section=section_name, provenance=provenance,
        k=np.concatenate(rows_k), s=np.concatenate(rows_s),
        N=np.concatenate(rows_N), states=np.vstack(rows_state),
        valid=np.concatenate(rows_valid))
    return grid.sorted()


def _project_batch(field: VectorField, section: EventSpec,
                   states: np.ndarray, tol: Tolerances
                   ) -> tuple[np.ndarray, np.ndarray]:
    """project_to_section over many states, batched by flow direction.

    Returns (projected, ok); rows that fail to reach the section or
    start tangent come back with ok False.
    """
    n = states.shape[0]
    out = np.array(states, dtype=np.float64, copy=True)
    ok = np.ones(n, dtype=bool)
    sigma = np.array([section.sigma(states[i]) for i in range(n)])
    rate = np.array([section.sigma_dot(states[i], field)
                     for i in range(n)])
    ok &= ~((sigma != 0.0) & (rate == 0.0))
    todo = ok & (np.abs(sigma) > 1e-12)
    hop = replace(section, eps_exclude=0.0, max_time=2.0 * math.pi)
    for forward in (True, False):
        sel = np.nonzero(todo & ((sigma * rate < 0.0) == forward))[0]
        if sel.size == 0:
            continue
        statuses, _, landed, _, _ = batch_integrate_to_event(
            field, states[sel], hop, forward=forward, tol=tol)
        good = statuses == 0
        out[sel[good]] = landed[good]
        ok[sel[~good]] = False
    return out, ok


def eval_Wp_global(series: ManifoldSeries, model: SystemModel,
                   section: EventSpec, k: int, s: float,
                   tol: Tolerances = Tolerances()) -> np.ndarray:
    """Section point of the globalized manifold at an arbitrary tag.

    Pulls the parameter back into the fundamental domain with the
    smallest number of multiplier divisions, projects the series point
    there, and re-applies the return map that many times. Exact on the
    conjugacy: the result agrees with a direct return-map image of the
    neighboring tag to integration accuracy.
    """
    if series.domain <= 0.0:
        raise DomainError("series has no measured fundamental domain; "
                          "run fundamental_domain first")
    field = model.field()
    unstable = series.kind == "unstable"
    growth = series.multiplier if unstable else 1.0 / series.multiplier
    depth = 0
    if abs(s) >= series.domain:
        depth = int(math.ceil(math.log(abs(s) / series.domain) /
                              math.log(growth)))
        depth = max(depth, 0)
        while abs(s) * growth ** (-depth) >= series.domain:
            depth += 1
    shift = 1 if unstable else -1
    k_pull = (k - shift * depth) % series.m
    s_pull = s * growth ** (-depth)
    z = project_to_section(model, section, eval_W(series, k_pull, s_pull),
                           tol=tol)
    for _ in range(depth):
        z = integrate_to_event(field, z, section, forward=unstable,
                               tol=tol).state
    return z


# ---------------------------------------------------------------------------
# serialization


def series_to_dict(series: ManifoldSeries) -> dict:
    return {
        "kind": series.kind,
        "degree": series.degree,
        "multiplier": series.multiplier,
        "scale": series.scale,
        "e_tol": series.e_tol,
        "domain": series.domain,
        "coeffs": series.coeffs.tolist(),
    }


def series_from_dict(data: dict) -> ManifoldSeries:
    return ManifoldSeries(kind=data["kind"], degree=int(data["degree"]),
                          coeffs=np.asarray(data["coeffs"],
                                            dtype=np.float64),
                          multiplier=float(data["multiplier"]),
                          scale=float(data["scale"]),
                          e_tol=float(data["e_tol"]),
                          domain=float(data["domain"]))


GRID_COLUMNS = "k,s,N,x,y,px,py,L,G,ell,g,valid"


def grid_to_rows(grid: ManifoldGrid, model: SystemModel) -> list[str]:
    """Formatted CSV rows including the osculating action-angle view."""
    rows = []
    for i in range(len(grid)):
        if grid.valid[i]:
            st = grid.states[i]
            try:
                dl = pcrtbp.delaunay(model, st)
                angles = [dl.L, dl.G, dl.ell, dl.g]
            except DomainError:
                # points deep inside the secondary's region can have
                # hyperbolic osculating motion; the Cartesian state is
                # still a perfectly good manifold point
                angles = [np.nan] * 4
            cells = [st[0], st[1], st[2], st[3], *angles]
            tail = ",".join(f"{v:.17g}" for v in cells)
        else:
            tail = ",".join(["nan"] * 8)
        rows.append(f"{grid.k[i]},{grid.s[i]:.17g},{grid.N[i]},{tail},"
                    f"{int(grid.valid[i])}")
    return rows


def write_grid_csv(grid: ManifoldGrid, model: SystemModel, path,
                   config_hash: str = "") -> None:
    lines = [f"# config_hash={config_hash}", GRID_COLUMNS]
    lines.extend(grid_to_rows(grid, model))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_grid_csv(path, kind: str = "", section: str = "",
                  provenance: str = "") -> ManifoldGrid:
    ks, ss, Ns, states, valids = [], [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("k,"):
                continue
            parts = line.split(",")
            ks.append(int(parts[0]))
            ss.append(float(parts[1]))
            Ns.append(int(parts[2]))
            states.append([float(v) for v in parts[3:7]])
            valids.append(bool(int(parts[11])))
    return ManifoldGrid(kind=kind, section=section, provenance=provenance,
                        k=np.asarray(ks, dtype=np.int64),
                        s=np.asarray(ss, dtype=np.float64),
                        N=np.asarray(Ns, dtype=np.int64),
                        states=np.asarray(states, dtype=np.float64),
                        valid=np.asarray(valids, dtype=bool))

"""Resonant periodic orbits of the apsidal return map.

Pipeline: seed an exact resonant ellipse of the two-body limit, continue
it in mass ratio (and energy if asked) with a Newton corrector, cut the
orbit into its section crossings, and extract the hyperbolic structure
of the monodromy: the multiplier pair, stable/unstable directions at
every crossing, and the rescaling that makes the per-crossing expansion
rates uniform around the orbit.

The corrector exploits the x-axis mirror symmetry: a trajectory leaving
the axis perpendicularly (y = 0, px = 0) that crosses it perpendicularly
again after time T/2 is periodic with period T. Unknowns are (x0, py0);
the residuals are px at the chosen half-period crossing plus either the
Jacobi constant or the half-period time, with sensitivities from the
variational flow. A full least-squares Newton on the period-T return
serves as fallback for seeds without the symmetry.

An m:n resonance (m revolutions of the test particle per n synodic
periods) gives an orbit crossing the periapse section m times per
period; exterior resonances (m < n) are seeded at apoapse instead.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import pcrtbp
from .exceptions import (ApsidalError, ConvergenceError, DomainError,
                         EventNotFoundError, IntegrationError,
                         NonHyperbolicError, TangencyError)
from .frames import solve_cohomological
from .integrate import (Tolerances, as_variational, collect_events,
                        integrate_to_event, integrate_with_stm,
                        plane_section)
from .pcrtbp import SystemModel

log = logging.getLogger(__name__)

__all__ = [
    "PeriodicOrbitData",
    "FloquetData",
    "RescaledFrame",
    "seed_resonant_orbit",
    "refine_periodic_orbit",
    "section_crossings",
    "build_orbit_data",
    "floquet_decomposition",
    "rescale_eigenvectors",
    "orbit_to_dict",
]

# |multiplier| must exceed this for the orbit to count as hyperbolic
HYPERBOLIC_MARGIN = 1e-4

# anything that can go wrong evaluating a corrector trial point
_TRIAL_FAILURES = (ConvergenceError, IntegrationError, EventNotFoundError)


@dataclass(frozen=True)
class PeriodicOrbitData:
    """A periodic orbit cut at its section crossings.

    X[k] are the crossing states (X[0] = x0), times[k] the crossing
    times in [0, T), tau[k] the return times to the next crossing
    (wrapping at the period), stms[k] the flow derivative over tau[k],
    and monodromy[k] the full-period flow derivative based at X[k].
    """

    model: SystemModel
    section: pcrtbp.SectionKind
    x0: np.ndarray
    period: float
    jacobi: float
    m: int
    X: np.ndarray          # (m, 4)
    times: np.ndarray      # (m,)
    tau: np.ndarray        # (m,)
    stms: np.ndarray       # (m, 4, 4)
    monodromy: np.ndarray  # (m, 4, 4)
    doubled: bool = False

    @property
    def trace_index(self) -> float:
        """tr(M) - 2 = lambda + 1/lambda for the nontrivial pair."""
        return float(np.trace(self.monodromy[0])) - 2.0

    @property
    def hyperbolic(self) -> bool:
        c = self.trace_index
        if abs(c) <= 2.0:
            return False
        lam = (abs(c) + math.sqrt(c * c - 4.0)) / 2.0
        return lam > 1.0 + HYPERBOLIC_MARGIN


@dataclass(frozen=True)
class FloquetData:
    """Multiplier pair and unit eigenvectors at every crossing.

    The per-crossing multipliers lambda_u_k satisfy
    stms[k] @ v_u[k] = lambda_u_k[k] * v_u[(k+1) % m] with all
    lambda_u_k positive (signs were absorbed by orientation flips,
    doubling the orbit first when the bundle is non-orientable), and
    their product is the full multiplier; same for the stable family.
    """

    lambda_u: float
    lambda_s: float
    v_u: np.ndarray         # (m, 4) unit vectors
    v_s: np.ndarray
    lambda_u_k: np.ndarray  # (m,)
    lambda_s_k: np.ndarray
    doubled: bool


@dataclass(frozen=True)
class RescaledFrame:
    """Eigenvectors rescaled so every crossing expands by the geometric
    mean multiplier: stms[k] @ vbar[k] = lambda_bar * vbar[(k+1) % m]."""

    lambda_u: float
    lambda_s: float
    vbar_u: np.ndarray   # (m, 4)
    vbar_s: np.ndarray
    a_u: np.ndarray      # (m,) scaling factors, a[0] = 1
    a_s: np.ndarray


def seed_resonant_orbit(model: SystemModel, m_res: int, n_res: int,
                        interior: bool, jacobi: float | None = None,
                        phase: int = +1,
                        apsis: str | None = None
                        ) -> tuple[np.ndarray, float]:
    """Exact m:n resonant ellipse of the two-body (mu = 0) limit.

    Semimajor axis a = (n/m)^(2/3); the eccentricity is fixed by the
    requested Jacobi constant through C = 1/a + 2*sqrt(a*(1-e^2)) at
    mu = 0 (e = 0.5 when no target is given). The state starts on the
    x axis at periapse for interior resonances, apoapse for exterior,
    on the positive axis for phase=+1 and negative for phase=-1, always
    prograde. Returns (state, period_guess) with period 2*pi*n.

    apsis overrides the starting apsis. The override selects between
    the two resonant families born from the same circular orbit: they
    differ by where the apses sit relative to conjunction, so at
    mu > 0 one choice continues into the stable member and the other
    into its hyperbolic partner.
    """
    if m_res <= 0 or n_res <= 0 or math.gcd(m_res, n_res) != 1:
        raise DomainError(f"resonance {m_res}:{n_res} must be coprime "
                          "positive integers")
    if interior and m_res <= n_res or not interior and m_res >= n_res:
        raise DomainError(f"{m_res}:{n_res} inconsistent with "
                          f"interior={interior}")
    a = (n_res / m_res) ** (2.0 / 3.0)
    if jacobi is None:
        e = 0.5
    else:
        half = (jacobi - 1.0 / a) / 2.0
        e_sq = 1.0 - half * half / a
        if half <= 0.0 or not 0.0 < e_sq < 1.0:
            raise DomainError(
                f"no prograde a={a:.6f} ellipse at jacobi={jacobi}")
        e = math.sqrt(e_sq)
    if apsis is None:
        apsis = "periapse" if interior else "apoapse"
    if apsis not in ("periapse", "apoapse"):
        raise DomainError(f"unknown apsis {apsis!r}")
    r = a * (1.0 - e) if apsis == "periapse" else a * (1.0 + e)
    v = math.sqrt(a * (1.0 - e * e)) / r
    if phase not in (+1, -1):
        raise DomainError("phase must be +1 or -1")
    state = np.array([phase * r, 0.0, 0.0, phase * v])
    return state, 2.0 * math.pi * n_res


def _perpendicular_residual(model: SystemModel, x0: float, py0: float,
                            crossing: int, tol: Tolerances):
    """State, chained STM and time at the chosen x-axis crossing."""
    field = model.field()
    var = as_variational(field)
    event = plane_section(index=1, offset=0.0,
                          max_time=8.0 * math.pi)
    y = np.zeros(20)
    y[:4] = (x0, 0.0, 0.0, py0)
    y[4:] = np.eye(4).ravel()
    elapsed = 0.0
    for _ in range(crossing):
        rec = integrate_to_event(var, y, event, forward=True, tol=tol)
        elapsed += rec.time
        y = rec.state
    state = y[:4].copy()
    stm = y[4:].reshape(4, 4).copy()
    f = pcrtbp.eom(model, state)
    if abs(f[1]) < 1e-12:
        raise ConvergenceError("tangential x-axis crossing")
    return state, stm, f, elapsed


def _newton_perpendicular(model: SystemModel, x0: float, py0: float,
                          crossing: int, target: tuple[str, float],
                          newton_tol: float, tol: Tolerances,
                          max_iter: int = 25):
    """Correct (x0, py0) so the crossing is perpendicular and the
    energy (or half period) hits its target. Returns (x0, py0, t_half)."""
    kind, goal = target
    res_norm = math.inf
    for _ in range(max_iter):
        try:
            state, stm, f, t_half = _perpendicular_residual(
                model, x0, py0, crossing, tol)
        except _TRIAL_FAILURES as exc:
            raise ConvergenceError(
                f"corrector left the feasible region: {exc}") from exc
        z0 = np.array([x0, 0.0, 0.0, py0])
        # crossing-time variation: dt = -Phi_row_y / ydot
        dt_dq = -stm[1, [0, 3]] / f[1]
        r1 = state[2]
        grad_px = stm[2, [0, 3]] + f[2] * dt_dq
        if kind == "jacobi":
            r2 = pcrtbp.jacobi(model, z0) - goal
            grad_2 = pcrtbp.jacobi_gradient(model, z0)[[0, 3]]
        elif kind == "period":
            r2 = t_half - goal / 2.0
            grad_2 = dt_dq
        else:
            raise DomainError(f"unknown refinement target {kind!r}")
        res = np.array([r1, r2])
        norm = float(np.max(np.abs(res)))
        if norm < newton_tol:
            return x0, py0, t_half
        jac = np.vstack([grad_px, grad_2])
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("singular corrector jacobian") from exc
        # damp on residual increase (skip the probe near convergence)
        scale = 1.0
        for _ in range(8 if norm > 1e-6 else 0):
            trial = (x0 + scale * step[0], py0 + scale * step[1])
            try:
                st_t, _, _, _ = _perpendicular_residual(
                    model, trial[0], trial[1], crossing, tol)
            except _TRIAL_FAILURES:
                scale *= 0.5
                continue
            zt = np.array([trial[0], 0.0, 0.0, trial[1]])
            if kind == "jacobi":
                r2t = pcrtbp.jacobi(model, zt) - goal
            else:
                r2t = 0.0  # recomputed next pass; accept on px alone
            trial_norm = max(abs(st_t[2]), abs(r2t))
            if trial_norm <= norm or scale < 0.2:
                break
            scale *= 0.5
        x0 += scale * step[0]
        py0 += scale * step[1]
        res_norm = norm
    raise ConvergenceError(
        f"perpendicular corrector stalled at residual {res_norm:.2e}")


def _newton_full(model: SystemModel, state: np.ndarray, period: float,
                 target: tuple[str, float],
                 newton_tol: float, tol: Tolerances, max_iter: int = 40):
    """Least-squares Newton on the full period-T return map.

    Unknowns (X0, T); residuals: return displacement, the section
    function at X0, and the energy target when one is given. The
    system is rank-deficient along the orbit direction, so each step
    is the minimum-norm least-squares solution.
    """
    kind, goal = target
    field = model.field()
    z = np.asarray(state, dtype=np.float64).copy()
    T = period if kind != "period" else goal
    prev = math.inf
    for _ in range(max_iter):
        zT, stm = integrate_with_stm(field, z, T, tol=tol)
        f_T = pcrtbp.eom(model, zT)
        sig, _ = pcrtbp.section_sigma(model, z)
        rows = [zT - z, [sig]]
        jacs = [np.hstack([stm - np.eye(4), f_T[:, None]]),
                np.hstack([_sigma_gradient(model, z)[None, :],
                           [[0.0]]])]
        if kind == "jacobi":
            rows.append([pcrtbp.jacobi(model, z) - goal])
            jacs.append(np.hstack([pcrtbp.jacobi_gradient(model, z)[None, :],
                                   [[0.0]]]))
        res = np.concatenate([np.atleast_1d(r) for r in rows])
        norm = float(np.max(np.abs(res)))
        if norm < newton_tol:
            return z, T
        if norm > 10.0 * prev + 1.0:
            break
        jac = np.vstack(jacs)
        if kind == "period":
            jac = jac[:, :4]
            step = np.linalg.lstsq(jac, -res, rcond=None)[0]
            step = np.append(step, 0.0)
        else:
            step = np.linalg.lstsq(jac, -res, rcond=None)[0]
        scale = 1.0 if norm < 1e-3 else 0.5
        z = z + scale * step[:4]
        T = T + scale * step[4]
        prev = norm
    raise ConvergenceError("full-period corrector did not converge")


def _sigma_gradient(model: SystemModel, state: np.ndarray) -> np.ndarray:
    x, y, px, py = state
    mu = model.mu
    return np.array([px, py + mu, x + mu, y])


def refine_periodic_orbit(model: SystemModel, seed: np.ndarray,
                          period_guess: float,
                          section: pcrtbp.SectionKind,
                          target: tuple[str, float],
                          newton_tol: float = 1e-12,
                          tol: Tolerances = Tolerances(),
                          mu_step_cap: float = 1e-3) -> PeriodicOrbitData:
    """Continue a two-body resonant seed to the model's mass ratio.

    target is ("jacobi", C) or ("period", T) and is enforced at every
    continuation step. The mass ratio ramps geometrically from zero
    with increments capped at mu_step_cap, halving on corrector
    failure. Seeds off the perpendicular-symmetry axis skip the ramp
    and go straight to the full-period corrector at the final mass
    ratio. Closure of the returned orbit is verified to 1e-10.

    Families that fold or pass near the secondary along the ramp can
    stall it, or worse, let the corrector drift onto a neighboring
    resonance. Both cases are caught (the latter by comparing the
    osculating semimajor axis to the seed's) and handed to a direct
    search at the full mass ratio, which scans both halves of the
    symmetry axis for a perpendicular return near the expected half
    period and keeps the zero matching the seed's resonance identity.
    """
    seed = np.asarray(seed, dtype=np.float64)
    tight = Tolerances(abs=min(tol.abs, 1e-13), rel=min(tol.rel, 1e-13),
                       max_steps=tol.max_steps)
    perpendicular = abs(seed[1]) < 1e-13 and abs(seed[2]) < 1e-13
    if not perpendicular:
        z, T = _newton_full(model, seed, period_guess, target,
                            newton_tol, tol)
        return _finish_orbit(model, z, T, section, target, tol)

    rescued = False
    try:
        x0, py0, t_half, crossing = _ramp_mass_ratio(
            model, seed, period_guess, target, newton_tol, tol,
            mu_step_cap)
    except ConvergenceError:
        if target[0] != "jacobi":
            raise
        log.info("mass-ratio ramp failed, switching to the axis search")
        x0, py0, t_half, crossing = _axis_family_rescue(
            model, seed, period_guess, target, newton_tol, tol)
        rescued = True

    if not rescued and target[0] == "jacobi":
        a_seed = _family_elements(model, seed).a
        a_got = pcrtbp.osculating_elements(
            model, np.array([x0, 0.0, 0.0, py0])).a
        if abs(a_got - a_seed) > 0.12 * abs(a_seed):
            log.info("ramp drifted off the seed family (a %.4f -> %.4f), "
                     "switching to the axis search", a_seed, a_got)
            x0, py0, t_half, crossing = _axis_family_rescue(
                model, seed, period_guess, target, newton_tol, tol)

    # final polish at tight tolerance: the unstable multiplier amplifies
    # any corrector slack over the full period, so closure needs the
    # half-period residual a notch below the working accuracy
    x0, py0, t_half = _newton_perpendicular(
        model, x0, py0, crossing, target, min(newton_tol, 2.5e-13), tight)
    z0 = np.array([x0, 0.0, 0.0, py0])
    return _finish_orbit(model, z0, 2.0 * t_half, section, target, tol)


def _ramp_mass_ratio(model: SystemModel, seed: np.ndarray,
                     period_guess: float, target: tuple[str, float],
                     newton_tol: float, tol: Tolerances,
                     mu_step_cap: float) -> tuple[float, float, float, int]:
    """Geometric mass-ratio continuation of a perpendicular seed."""
    x0, py0 = float(seed[0]), float(seed[3])

    # locate which x-axis crossing sits at the half period (mu = 0)
    m0 = SystemModel(mu=0.0, name=model.name)
    field0 = m0.field()
    half = period_guess / 2.0
    hits = collect_events(field0, seed, plane_section(1, 0.0),
                          half * 1.05 + 0.1, tol=tol)
    if not hits:
        raise ConvergenceError("seed never returns to the x axis")
    crossing = int(np.argmin([abs(r.time - half) for r in hits])) + 1
    if abs(hits[crossing - 1].time - half) > 0.05 * period_guess:
        raise ConvergenceError("no x-axis crossing near the half period")

    mu_now = 0.0
    step = min(2.5e-4, mu_step_cap)
    mdl = SystemModel(mu=0.0, name=model.name)
    x0, py0, t_half = _newton_perpendicular(
        mdl, x0, py0, crossing, target, newton_tol, tol)
    while mu_now < model.mu:
        advance = min(step, model.mu - mu_now)
        while True:
            try:
                trial_model = SystemModel(mu=mu_now + advance,
                                          name=model.name)
                nx, npy, nt = _newton_perpendicular(
                    trial_model, x0, py0, crossing, target, newton_tol,
                    tol)
                # a converged answer far from the previous member means
                # the corrector hopped to a different branch
                jump = max(abs(nx - x0), abs(npy - py0))
                if jump > 1e3 * advance or abs(nt - t_half) > 0.2:
                    raise ConvergenceError(
                        f"continuation jump ({jump:.2e}) at "
                        f"mu={mu_now + advance:.6f}")
                break
            except ConvergenceError:
                advance *= 0.5
                if advance < 1e-6:
                    raise
        mu_now += advance
        x0, py0, t_half = nx, npy, nt
        step = min(2.0 * advance, mu_step_cap)
    return x0, py0, t_half, crossing


def _perpendicular_return(model: SystemModel, x0: float, py0: float,
                          t_expect: float, window: float,
                          tol: Tolerances):
    """px and time of the x-axis crossing nearest t_expect, or None."""
    try:
        hits = collect_events(model.field(),
                              np.array([x0, 0.0, 0.0, py0]),
                              plane_section(1, 0.0),
                              t_expect * (1.0 + window) + 0.1, tol=tol)
    except ApsidalError:
        return None
    near = [r for r in hits if abs(r.time - t_expect) <= window * t_expect]
    if not near:
        return None
    rec = min(near, key=lambda r: abs(r.time - t_expect))
    return float(rec.state[2]), float(rec.time), hits.index(rec) + 1


def _family_elements(model: SystemModel, seed: np.ndarray):
    """Elements of the two-body family a seed was built from.

    Seeds are exact states of the mu = 0 limit, so they are fitted
    there; reading them at the full mass ratio shifts the primary off
    their construction center, which wrecks the fit for seeds with a
    low periapse. States of the full model are the opposite case and
    take the primary-centered fit at the model's own mass ratio.
    """
    try:
        return pcrtbp.osculating_elements(
            SystemModel(mu=0.0, name=model.name), seed)
    except ApsidalError:
        return pcrtbp.osculating_elements(model, seed)


def _axis_family_rescue(model: SystemModel, seed: np.ndarray,
                        period_guess: float, target: tuple[str, float],
                        newton_tol: float, tol: Tolerances
                        ) -> tuple[float, float, float, int]:
    """Direct symmetric-orbit search at the full mass ratio.

    At fixed Jacobi constant the initial condition on the symmetry
    axis has one free coordinate, so perpendicular returns near the
    expected half period are zeros of a scalar function of x0. Both
    axis halves and both momentum roots are scanned and brackets are
    bisected. Stretches where the return is censored (the nearest
    crossing leaves the time window) or hops between crossings are
    subdivided adaptively: near a tangency with the axis a pair of
    crossings is born and the sign change can occupy a band much
    narrower than the base grid. The zero whose two-body elements
    best match the seed family is polished and returned. This
    reaches family members whose continuation from mu = 0 folds back
    or threads a close encounter with the secondary.
    """
    _, C = target
    mu = model.mu
    el_seed = _family_elements(model, seed)
    a_seed, e_seed = el_seed.a, el_seed.e
    r0 = abs(float(seed[0]))
    t0 = period_guess / 2.0
    window = 0.27

    def momentum_roots(x0):
        U = (1.0 - mu) / abs(x0 + mu) + mu / abs(x0 - 1.0 + mu)
        disc = x0 * x0 + 2.0 * U - C
        if disc <= 0.0:
            return ()
        root = math.sqrt(disc)
        return (x0 - root, x0 + root)

    def sample(x0, branch):
        roots = momentum_roots(x0)
        if not roots:
            return None
        py0 = sorted(roots, key=abs)[branch]
        ret = _perpendicular_return(model, x0, py0, t0, window, tol)
        if ret is None:
            return None
        return (py0,) + ret

    candidates = []

    def polish(xa, sa, xb, branch):
        lo, hi, flo = xa, xb, sa[1]
        for _ in range(52):
            mid = 0.5 * (lo + hi)
            sm = sample(mid, branch)
            if sm is None:
                return
            if flo * sm[1] <= 0.0:
                hi = mid
            else:
                lo, flo = mid, sm[1]
        xz = 0.5 * (lo + hi)
        sz = sample(xz, branch)
        if sz is None:
            return
        try:
            xn, pyn, tn = _newton_perpendicular(
                model, xz, sz[0], sz[3], target, newton_tol, tol)
            el = pcrtbp.osculating_elements(
                model, np.array([xn, 0.0, 0.0, pyn]))
        except ApsidalError:
            return
        if (abs(el.a - a_seed) <= 0.12 * abs(a_seed)
                and abs(el.e - e_seed) <= 0.15
                and abs(tn - t0) <= window * t0):
            candidates.append((abs(el.a - a_seed), xn, pyn, tn, sz[3]))

    def walk(pts, branch, depth):
        for (xa, sa), (xb, sb) in zip(pts[:-1], pts[1:]):
            if (sa is not None and sb is not None
                    and abs(sa[2] - sb[2]) <= 0.2 * t0):
                # same-crossing pair: bracket on a sign change of the
                # perpendicularity residual
                if sa[1] * sb[1] <= 0.0:
                    polish(xa, sa, xb, branch)
                continue
            if depth == 0 or (sa is None and sb is None):
                continue
            fine = [(xa, sa)]
            fine += [(x, sample(x, branch))
                     for x in np.linspace(xa, xb, 9)[1:-1]]
            fine.append((xb, sb))
            walk(fine, branch, depth - 1)

    for sign in (1.0, -1.0):
        xs = sign * np.linspace(0.70, 1.32, 240) * r0
        for branch in (0, 1):
            pts = [(x, sample(x, branch)) for x in xs]
            walk(pts, branch, 2)

    if not candidates:
        raise ConvergenceError(
            f"axis search found no perpendicular return matching the "
            f"seed family (a={a_seed:.4f}) at the target energy")
    _, x0, py0, t_half, crossing = min(candidates)
    log.info("axis search converged at x0=%.9f (half period %.6f)",
             x0, t_half)
    return x0, py0, t_half, crossing


def _polish_full_return(model: SystemModel, z0: np.ndarray, period: float,
                        target: tuple[str, float], tight: Tolerances
                        ) -> tuple[np.ndarray, float]:
    """Newton on the period-T displacement at the tightest tolerance.

    Folds the integrator's own systematic drift into (x0, T), which is
    what makes the later closure check meaningful at 1e-10 for orbits
    whose multiplier amplifies every upstream error. Keeps the section
    condition and the energy or period target in the system; only the
    coordinates that are not exactly zero are adjusted, so a symmetric
    orbit stays exactly symmetric.
    """
    kind, goal = target
    field = model.field()
    z = z0.copy()
    T = period
    cols = [i for i in range(4) if z[i] != 0.0]
    free_T = kind != "period"
    best_gap, best_z, best_T = math.inf, z.copy(), T
    for _ in range(6):
        zT, stm = integrate_with_stm(field, z, T, tol=tight)
        g = zT - z
        gap = float(np.max(np.abs(g)))
        if gap < best_gap:
            best_gap, best_z, best_T = gap, z.copy(), T
        if gap < 3e-11:
            break
        sig, _ = pcrtbp.section_sigma(model, z)
        res = [g, [sig]]
        jac_rows = [np.hstack([(stm - np.eye(4))[:, cols],
                               pcrtbp.eom(model, zT)[:, None]]),
                    np.hstack([_sigma_gradient(model, z)[None, cols],
                               [[0.0]]])]
        if kind == "jacobi":
            res.append([pcrtbp.jacobi(model, z) - goal])
            jac_rows.append(np.hstack(
                [pcrtbp.jacobi_gradient(model, z)[None, cols], [[0.0]]]))
        res = np.concatenate([np.atleast_1d(r) for r in res])
        jac = np.vstack(jac_rows)
        if not free_T:
            jac = jac[:, :-1]
        step = np.linalg.lstsq(jac, -res, rcond=None)[0]
        z[cols] += step[:len(cols)]
        if free_T:
            T += step[-1]
    return best_z, best_T, best_gap


def _finish_orbit(model: SystemModel, z0: np.ndarray, period: float,
                  section: pcrtbp.SectionKind,
                  target: tuple[str, float], tol: Tolerances
                  ) -> PeriodicOrbitData:
    tight = Tolerances(abs=1e-14, rel=1e-14, max_steps=tol.max_steps)
    # root the anchor on the section before the last polish: closure
    # enforced at one point degrades along the slide to another (the
    # in-period flow derivative can far exceed the multiplier near
    # the secondary), so the polish must happen where X[0] will live
    event = pcrtbp.make_section(model, section, max_time=period + 1e-6)
    sig, sdot = pcrtbp.section_sigma(model, z0)
    anchored = (abs(sig) <= 1e-9 and event.accepts(z0)
                and event.direction * sdot >= 0.0)
    if not anchored:
        z0 = integrate_to_event(model.field(), z0, event, forward=True,
                                tol=tight).state
    z0, period, closure = _polish_full_return(model, z0, period, target,
                                              tight)
    if closure > 1e-10:
        raise ConvergenceError(f"orbit closure {closure:.2e} exceeds 1e-10")
    return build_orbit_data(model, z0, period, section, tol=tol)


def section_crossings(model: SystemModel, x0: np.ndarray, period: float,
                      section: pcrtbp.SectionKind,
                      tol: Tolerances = Tolerances()
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Crossing states, times and return times over one period.

    x0 may sit anywhere on the orbit. When it is not itself an
    accepted crossing (an orbit rooted at the opposite apsis, say),
    the anchor slides forward to the first one; crossing 0 is the
    anchor either way. The crossing at time ~period closes the loop
    and is used only to validate the return; return times wrap
    through it.
    """
    event = pcrtbp.make_section(model, section,
                                max_time=period + 1e-6)
    sig, sdot = pcrtbp.section_sigma(model, x0)
    anchored = (abs(sig) <= 1e-9 and event.accepts(x0)
                and event.direction * sdot >= 0.0)
    if not anchored:
        rec = integrate_to_event(model.field(), x0, event, forward=True,
                                 tol=tol)
        x0 = rec.state
    hits = collect_events(model.field(), x0, event, period + 1e-6,
                          tol=tol)
    if not hits:
        raise DomainError("orbit never crosses its section")
    last = hits[-1]
    if abs(last.time - period) > 1e-6:
        raise DomainError(
            f"no closing crossing near t=T (last at {last.time:.6f}, "
            f"T={period:.6f}); is x0 periodic on this section?")
    # the unstable multiplier amplifies integration noise over a full
    # period, so the return miss only flags gross non-periodicity
    ret_err = float(np.max(np.abs(last.state - x0)))
    if ret_err > 1e-6:
        raise DomainError(f"section return misses x0 by {ret_err:.2e}")
    inner = hits[:-1]
    times = np.concatenate([[0.0], [r.time for r in inner]])
    X = np.vstack([x0] + [r.state for r in inner])
    for k in range(X.shape[0]):
        _, sdot = pcrtbp.section_sigma(model, X[k])
        if abs(sdot) < 1e-8:
            raise TangencyError(
                f"crossing {k} tangent to the section (sigma_dot="
                f"{sdot:.2e})")
    tau = np.diff(np.append(times, period))
    return X, times, tau


def build_orbit_data(model: SystemModel, x0: np.ndarray, period: float,
                     section: pcrtbp.SectionKind,
                     tol: Tolerances = Tolerances(),
                     doubled: bool = False) -> PeriodicOrbitData:
    """Assemble crossings, per-leg flow derivatives and monodromies.

    Crossing times come from event detection, but each X(k+1) is then
    re-chained as the fixed-time image of X(k) from the same pass that
    produces the leg derivative S_k, and monodromies are built as
    cyclic products of the legs. Everything downstream (multipliers,
    bundles, frames) then sees one mutually consistent set of matrices
    instead of independently integrated ones; with the strong
    stretching of eccentric legs that consistency is worth several
    digits in the frame invariants.
    """
    X, times, tau = section_crossings(model, x0, period, section, tol=tol)
    field = model.field()
    m = X.shape[0]
    stm_tol = Tolerances(abs=1e-14, rel=1e-14, max_steps=tol.max_steps)
    stms = np.empty((m, 4, 4))
    for k in range(m):
        zT, stms[k] = integrate_with_stm(field, X[k], tau[k], tol=stm_tol)
        if k < m - 1:
            X[k + 1] = zT
    mono = np.empty((m, 4, 4))
    for k in range(m):
        acc = np.eye(4)
        for j in range(m):
            acc = stms[(k + j) % m] @ acc
        mono[k] = acc
    return PeriodicOrbitData(
        model=model, section=section, x0=X[0].copy(),
        period=float(period), jacobi=pcrtbp.jacobi(model, X[0]), m=m,
        X=X, times=times, tau=tau, stms=stms, monodromy=mono,
        doubled=doubled)


def _least_singular_vector(A: np.ndarray) -> np.ndarray:
    return np.linalg.svd(A)[2][-1]


def _power_refine(stms: np.ndarray, v0: np.ndarray, unstable: bool,
                  sweeps: int = 60) -> np.ndarray:
    """Drive an eigenvector loop onto the invariant bundle of the
    numerical leg matrices by iterating around the cycle.

    Forward multiplication converges to the unstable bundle, backward
    solves to the stable one; either way the result satisfies
    stms[k] v(k) || v(k+1) to rounding, so downstream invariants hold
    exactly with respect to the matrices actually in hand.
    """
    m = stms.shape[0]
    out = np.empty((m, 4))
    v = v0 / np.linalg.norm(v0)
    prev = None
    for _ in range(sweeps):
        if unstable:
            for k in range(m):
                v = stms[k] @ v
                v /= np.linalg.norm(v)
                out[(k + 1) % m] = v
        else:
            for k in range(m - 1, -1, -1):
                v = np.linalg.solve(stms[k], v)
                v /= np.linalg.norm(v)
                out[k] = v
        if prev is not None:
            drift = min(float(np.max(np.abs(out - prev))),
                        float(np.max(np.abs(out + prev))))
            if drift < 1e-15:
                break
        prev = out.copy()
    return out


def _oriented_multipliers(stms: np.ndarray, vecs: np.ndarray
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Flip eigenvector signs so consecutive multipliers are positive.

    vecs[0]'s sign is pinned first (first component of magnitude above
    1e-8 made positive); flips then propagate around the loop. The
    last multiplier keeps its sign and is negative exactly when the
    bundle is non-orientable.
    """
    m = vecs.shape[0]
    out = vecs.copy()
    lead = np.flatnonzero(np.abs(out[0]) > 1e-8)[0]
    if out[0, lead] < 0.0:
        out[0] = -out[0]
    lam = np.empty(m)
    for k in range(m):
        w = stms[k] @ out[k]
        nxt = (k + 1) % m
        lam[k] = float(w @ out[nxt])
        if lam[k] < 0.0 and k < m - 1:
            out[nxt] = -out[nxt]
            lam[k] = -lam[k]
    return out, lam


def floquet_decomposition(orbit: PeriodicOrbitData,
                          tol: Tolerances = Tolerances()
                          ) -> tuple[PeriodicOrbitData, FloquetData]:
    """Multiplier pair and eigenvector loops of the orbit.

    Returns (orbit, floquet); when the full multiplier is negative the
    orbit is replaced by its double cover (period 2T, multipliers
    squared) so the per-crossing multipliers can all be made positive,
    and the doubled flag is set on both.
    """
    c = orbit.trace_index
    if abs(c) <= 2.0 + 1e-12:
        raise NonHyperbolicError(
            f"multiplier on the unit circle (lambda+1/lambda = {c:.6g})")
    if c < 0.0:
        doubled = build_orbit_data(orbit.model, orbit.x0,
                                   2.0 * orbit.period, orbit.section,
                                   tol=tol, doubled=True)
        orbit2, fl = floquet_decomposition(doubled, tol=tol)
        return orbit2, replace(fl, doubled=True)

    lam_u = (c + math.sqrt(c * c - 4.0)) / 2.0
    if lam_u <= 1.0 + HYPERBOLIC_MARGIN:
        raise NonHyperbolicError(
            f"multiplier {lam_u:.8f} too close to the unit circle")
    lam_s = (c - math.sqrt(c * c - 4.0)) / 2.0

    # nullspace of the crossing-0 monodromy seeds each loop; cycling
    # the per-leg matrices then sharpens it onto their exact bundle
    vu0 = _least_singular_vector(orbit.monodromy[0] - lam_u * np.eye(4))
    vs0 = _least_singular_vector(orbit.monodromy[0] - lam_s * np.eye(4))
    vu = _power_refine(orbit.stms, vu0, unstable=True)
    vs = _power_refine(orbit.stms, vs0, unstable=False)
    vu, lam_u_k = _oriented_multipliers(orbit.stms, vu)
    vs, lam_s_k = _oriented_multipliers(orbit.stms, vs)
    if lam_u_k[-1] < 0.0 or lam_s_k[-1] < 0.0:
        # non-orientable bundle with a positive full multiplier should
        # not happen; doubling still fixes it
        doubled = build_orbit_data(orbit.model, orbit.x0,
                                   2.0 * orbit.period, orbit.section,
                                   tol=tol, doubled=True)
        orbit2, fl = floquet_decomposition(doubled, tol=tol)
        return orbit2, replace(fl, doubled=True)
    return orbit, FloquetData(
        lambda_u=lam_u, lambda_s=lam_s, v_u=vu, v_s=vs,
        lambda_u_k=lam_u_k, lambda_s_k=lam_s_k, doubled=orbit.doubled)


def rescale_eigenvectors(floquet: FloquetData) -> RescaledFrame:
    """Scale the eigenvector loops so each crossing expands uniformly.

    With lambda_bar the geometric mean of the per-crossing multipliers,
    scalings a(k) solving a(k)/a(k+1) = lambda_bar/lambda_k (a circle
    equation in log form, normalized a(0) = 1) give
    stms[k] @ vbar[k] = lambda_bar * vbar[k+1 mod m].
    """
    out = {}
    for lam_k, vecs, tag in ((floquet.lambda_u_k, floquet.v_u, "u"),
                             (floquet.lambda_s_k, floquet.v_s, "s")):
        logs = np.log(lam_k)
        lam_bar = math.exp(float(np.mean(logs)))
        b = -(logs - math.log(lam_bar))
        b[-1] = -float(np.sum(b[:-1]))  # close the telescoping exactly
        u = solve_cohomological(b)
        a = np.exp(u)
        out[tag] = (lam_bar, a, a[:, None] * vecs)
    return RescaledFrame(
        lambda_u=out["u"][0], lambda_s=out["s"][0],
        vbar_u=out["u"][2], vbar_s=out["s"][2],
        a_u=out["u"][1], a_s=out["s"][1])


def orbit_to_dict(orbit: PeriodicOrbitData,
                  floquet: FloquetData | None = None) -> dict:
    """JSON-ready record of the orbit (and its multiplier if known)."""
    d = {
        "model": orbit.model.name,
        "mu": orbit.model.mu,
        "section": orbit.section,
        "C": orbit.jacobi,
        "T": orbit.period,
        "m": orbit.m,
        "doubled": orbit.doubled,
        "x0": orbit.x0.tolist(),
        "X": orbit.X.tolist(),
        "t_k": orbit.times.tolist(),
        "tau": orbit.tau.tolist(),
    }
    if floquet is not None:
        d["lambda_u_tilde"] = floquet.lambda_u
    return d

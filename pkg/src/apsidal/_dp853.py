"""Adaptive Dormand-Prince 8(5,3) core with section-event detection.

Implements the embedded pair with the blended 5th/3rd order error
estimate and the degree-7 dense output of Hairer's DOP853, compiled with
numba so the Poincare-map heavy stages (manifold globalization, orbit
refinement, connection refinement) run at native speed on one core.

Event detection follows a conservative per-step protocol: after every
accepted step the section function is sampled at the step endpoints and
at four interior points of the dense interpolant, each sign change is
bracketed, and the root is polished with an Illinois-damped regula
falsi until |sigma| falls below the requested tolerance. Roots inside
the exclusion window near t=0 are ignored so return maps can start on
the section itself. Backward integration negates the field; reported
event times are always the positive elapsed integration time.
"""

import math

import numpy as np
from numba import njit, prange

from ._dp853_tableau import A, B, C, D, E3, E5
from . import _field_kernels as fk

# outcome codes shared with the python wrappers
OK = 0
NO_EVENT = 1
FAIL_MAX_STEPS = 2
FAIL_UNDERFLOW = 3
FAIL_NONFINITE = 4

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_ERR_EXP = -0.125  # -1/(estimator order + 1)


@njit(cache=True)
def _rhs_signed(fkind, fparams, sign, y, out):
    fk.rhs(fkind, fparams, y, out)
    if sign < 0.0:
        for i in range(out.shape[0]):
            out[i] = -out[i]


@njit(cache=True)
def _initial_step(fkind, fparams, sign, y0, f0, t_span, rtol, atol):
    n = y0.shape[0]
    d0 = 0.0
    d1 = 0.0
    for i in range(n):
        sc = atol + rtol * abs(y0[i])
        d0 += (y0[i] / sc) ** 2
        d1 += (f0[i] / sc) ** 2
    d0 = math.sqrt(d0 / n)
    d1 = math.sqrt(d1 / n)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, t_span)

    y1 = np.empty(n)
    f1 = np.empty(n)
    for i in range(n):
        y1[i] = y0[i] + h0 * f0[i]
    _rhs_signed(fkind, fparams, sign, y1, f1)
    d2 = 0.0
    for i in range(n):
        sc = atol + rtol * abs(y0[i])
        d2 += ((f1[i] - f0[i]) / sc) ** 2
    d2 = math.sqrt(d2 / n) / h0

    dm = max(d1, d2)
    if dm <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / dm) ** 0.125
    return min(100.0 * h0, h1, t_span)


@njit(cache=True)
def _stages_and_error(fkind, fparams, sign, y, h, K, y_stage, y_new, rtol,
                      atol):
    """Run the 12 stages plus the error evaluation at y_new.

    K[0] must already hold the signed field at y. On return K[12] holds
    the signed field at y_new. Returns the scaled error norm.
    """
    n = y.shape[0]
    for s in range(1, 12):
        for i in range(n):
            acc = 0.0
            for j in range(s):
                a = A[s, j]
                if a != 0.0:
                    acc += a * K[j, i]
            y_stage[i] = y[i] + h * acc
        _rhs_signed(fkind, fparams, sign, y_stage, K[s])

    for i in range(n):
        acc = 0.0
        for j in range(12):
            b = B[j]
            if b != 0.0:
                acc += b * K[j, i]
        y_new[i] = y[i] + h * acc
    _rhs_signed(fkind, fparams, sign, y_new, K[12])

    err5_sq = 0.0
    err3_sq = 0.0
    for i in range(n):
        sc = atol + rtol * max(abs(y[i]), abs(y_new[i]))
        e5 = 0.0
        e3 = 0.0
        for s in range(13):
            e5 += E5[s] * K[s, i]
            e3 += E3[s] * K[s, i]
        e5 /= sc
        e3 /= sc
        err5_sq += e5 * e5
        err3_sq += e3 * e3
    denom = err5_sq + 0.01 * err3_sq
    if denom <= 0.0:
        return 0.0
    return abs(h) * err5_sq / math.sqrt(denom * n)


@njit(cache=True)
def _dense_coeffs(fkind, fparams, sign, y, y_new, h, K, y_stage, F):
    """Three extra stages, then the 7 interpolation vectors."""
    n = y.shape[0]
    for s in range(13, 16):
        for i in range(n):
            acc = 0.0
            for j in range(s):
                a = A[s, j]
                if a != 0.0:
                    acc += a * K[j, i]
            y_stage[i] = y[i] + h * acc
        _rhs_signed(fkind, fparams, sign, y_stage, K[s])

    for i in range(n):
        delta = y_new[i] - y[i]
        F[0, i] = delta
        F[1, i] = h * K[0, i] - delta
        F[2, i] = 2.0 * delta - h * (K[12, i] + K[0, i])
        for r in range(4):
            acc = 0.0
            for j in range(16):
                d = D[r, j]
                if d != 0.0:
                    acc += d * K[j, i]
            F[3 + r, i] = h * acc


@njit(cache=True)
def _dense_eval(F, y_old, x, out):
    n = y_old.shape[0]
    xm = 1.0 - x
    for i in range(n):
        v = F[6, i]
        v = F[5, i] + x * v
        v = F[4, i] + xm * v
        v = F[3, i] + x * v
        v = F[2, i] + xm * v
        v = F[1, i] + x * v
        v = F[0, i] + xm * v
        out[i] = y_old[i] + x * v


@njit(cache=True)
def flow_fixed(fkind, fparams, y0, sign, t_end, rtol, atol, max_steps):
    """Integrate dy/dtau = sign*f(y) from tau=0 to tau=t_end (>= 0).

    Returns (status, y_final).
    """
    n = y0.shape[0]
    y = y0.copy()
    if t_end == 0.0:
        return OK, y

    f = np.empty(n)
    _rhs_signed(fkind, fparams, sign, y, f)
    for i in range(n):
        if not math.isfinite(f[i]):
            return FAIL_NONFINITE, y
    h = _initial_step(fkind, fparams, sign, y, f, t_end, rtol, atol)

    K = np.empty((13, n))
    y_stage = np.empty(n)
    y_new = np.empty(n)
    t = 0.0
    steps = 0
    while t < t_end:
        if steps >= max_steps:
            return FAIL_MAX_STEPS, y
        if h < 1e-14 * max(1.0, t):
            return FAIL_UNDERFLOW, y
        if t + h > t_end:
            h = t_end - t
        for i in range(n):
            K[0, i] = f[i]
        err = _stages_and_error(fkind, fparams, sign, y, h, K, y_stage,
                                y_new, rtol, atol)
        steps += 1
        if not math.isfinite(err):
            h *= _MIN_FACTOR
            continue
        if err > 1.0:
            h *= max(_MIN_FACTOR, _SAFETY * err ** _ERR_EXP)
            continue
        t += h
        for i in range(n):
            y[i] = y_new[i]
            f[i] = K[12, i]
        if err == 0.0:
            factor = _MAX_FACTOR
        else:
            factor = min(_MAX_FACTOR, _SAFETY * err ** _ERR_EXP)
        h *= factor
    return OK, y


@njit(cache=True)
def flow_event(fkind, fparams, y0, sign, max_time, skind, sparams,
               direction, ekind, eparams, gkind, gparams, eps_exclude,
               sigma_tol, rtol, atol, max_steps):
    """Integrate until the section event fires or max_time elapses.

    Returns (status, t_event, y_event, sigma_residual, guard_min).
    status OK means an accepted event; NO_EVENT means max_time was
    reached (y_event then holds the final state). Event times are the
    positive elapsed time regardless of integration direction.
    """
    n = y0.shape[0]
    y = y0.copy()
    guard_min = fk.guard_value(gkind, gparams, y)

    f = np.empty(n)
    _rhs_signed(fkind, fparams, sign, y, f)
    for i in range(n):
        if not math.isfinite(f[i]):
            return FAIL_NONFINITE, 0.0, y, math.nan, guard_min
    h = _initial_step(fkind, fparams, sign, y, f, max_time, rtol, atol)

    K = np.empty((16, n))
    y_stage = np.empty(n)
    y_new = np.empty(n)
    y_tmp = np.empty(n)
    y_root = np.empty(n)
    F = np.empty((7, n))
    xs = np.empty(6)
    sig = np.empty(6)
    xs[0] = 0.0
    xs[1] = 0.2
    xs[2] = 0.4
    xs[3] = 0.6
    xs[4] = 0.8
    xs[5] = 1.0

    sigma_here = fk.section_value(skind, sparams, y)
    t = 0.0
    steps = 0
    while t < max_time:
        if steps >= max_steps:
            return FAIL_MAX_STEPS, t, y, math.nan, guard_min
        if h < 1e-14 * max(1.0, t):
            return FAIL_UNDERFLOW, t, y, math.nan, guard_min
        if t + h > max_time:
            h = max_time - t
        for i in range(n):
            K[0, i] = f[i]
        err = _stages_and_error(fkind, fparams, sign, y, h, K, y_stage,
                                y_new, rtol, atol)
        steps += 1
        if not math.isfinite(err):
            h *= _MIN_FACTOR
            continue
        if err > 1.0:
            h *= max(_MIN_FACTOR, _SAFETY * err ** _ERR_EXP)
            continue

        # accepted: build the interpolant and scan for section roots
        _dense_coeffs(fkind, fparams, sign, y, y_new, h, K, y_stage, F)
        sig[0] = sigma_here
        for q in range(1, 5):
            _dense_eval(F, y, xs[q], y_tmp)
            sig[q] = fk.section_value(skind, sparams, y_tmp)
            g = fk.guard_value(gkind, gparams, y_tmp)
            if g < guard_min:
                guard_min = g
        sig[5] = fk.section_value(skind, sparams, y_new)
        g = fk.guard_value(gkind, gparams, y_new)
        if g < guard_min:
            guard_min = g

        for q in range(5):
            xa = xs[q]
            xb = xs[q + 1]
            siga = sig[q]
            sigb = sig[q + 1]
            if t + xb * h <= eps_exclude:
                continue
            if siga == 0.0:
                # nudge off an exact zero (e.g. starting on the section)
                xa = xa + 0.05 * (xb - xa)
                _dense_eval(F, y, xa, y_tmp)
                siga = fk.section_value(skind, sparams, y_tmp)
                if siga == 0.0:
                    continue
            hit = False
            xr = xb
            sigr = sigb
            if sigb == 0.0:
                if direction == 0 or \
                        direction * sign * (sigb - siga) > 0.0:
                    hit = True
            elif siga * sigb < 0.0:
                # forward-time crossing direction from the secant slope
                if direction != 0 and \
                        direction * sign * (sigb - siga) < 0.0:
                    continue
                fa = siga
                fb = sigb
                side = 0
                for _ in range(100):
                    dfv = fb - fa
                    if dfv != 0.0:
                        xm = xb - fb * (xb - xa) / dfv
                    else:
                        xm = 0.5 * (xa + xb)
                    if xm <= xa or xm >= xb:
                        xm = 0.5 * (xa + xb)
                    _dense_eval(F, y, xm, y_tmp)
                    fm = fk.section_value(skind, sparams, y_tmp)
                    if abs(fm) <= sigma_tol:
                        xr = xm
                        sigr = fm
                        hit = True
                        break
                    if fa * fm < 0.0:
                        xb = xm
                        fb = fm
                        if side == -1:
                            fa *= 0.5
                        side = -1
                    else:
                        xa = xm
                        fa = fm
                        if side == 1:
                            fb *= 0.5
                        side = 1
                    if xb - xa < 1e-16:
                        xr = xm
                        sigr = fm
                        hit = True
                        break
            if not hit:
                continue
            t_ev = t + xr * h
            if t_ev <= eps_exclude:
                continue
            _dense_eval(F, y, xr, y_root)
            if not fk.extra_accept(ekind, eparams, y_root):
                continue
            g = fk.guard_value(gkind, gparams, y_root)
            if g < guard_min:
                guard_min = g
            return OK, t_ev, y_root, sigr, guard_min

        t += h
        sigma_here = sig[5]
        for i in range(n):
            y[i] = y_new[i]
            f[i] = K[12, i]
        if err == 0.0:
            factor = _MAX_FACTOR
        else:
            factor = min(_MAX_FACTOR, _SAFETY * err ** _ERR_EXP)
        h *= factor
    return NO_EVENT, t, y, fk.section_value(skind, sparams, y), guard_min


@njit(cache=True, parallel=True)
def flow_fixed_batch(fkind, fparams, Y0, sign, t_ends, rtol, atol,
                     max_steps):
    m, n = Y0.shape
    statuses = np.empty(m, dtype=np.int64)
    out = np.empty((m, n))
    for r in prange(m):
        st, yf = flow_fixed(fkind, fparams, Y0[r].copy(), sign, t_ends[r],
                            rtol, atol, max_steps)
        statuses[r] = st
        out[r] = yf
    return statuses, out


@njit(cache=True, parallel=True)
def flow_event_batch(fkind, fparams, Y0, sign, max_time, skind, sparams,
                     direction, ekind, eparams, gkind, gparams,
                     eps_exclude, sigma_tol, rtol, atol, max_steps):
    m, n = Y0.shape
    statuses = np.empty(m, dtype=np.int64)
    times = np.empty(m)
    out = np.empty((m, n))
    residuals = np.empty(m)
    guards = np.empty(m)
    for r in prange(m):
        st, te, ye, sr, g = flow_event(
            fkind, fparams, Y0[r].copy(), sign, max_time, skind, sparams,
            direction, ekind, eparams, gkind, gparams, eps_exclude,
            sigma_tol, rtol, atol, max_steps)
        statuses[r] = st
        times[r] = te
        out[r] = ye
        residuals[r] = sr
        guards[r] = g
    return statuses, times, out, residuals, guards

"""Compiled right-hand sides, section functions and diagnostics.

Model dynamics are selected by small integer tags instead of function
pointers so every caller of the integrator core compiles once and caches
cleanly. The planar restricted three-body field comes in three flavours
(point, variational, jet transport); a harmonic oscillator is included
as the reference field for integrator validation.

State conventions for the restricted three-body field: y = (x, y, px, py)
in the rotating barycentric frame with the primary of mass 1-mu at
(-mu, 0), the secondary of mass mu at (1-mu, 0), and momenta equal to
inertial velocities.
"""

import math

import numpy as np
from numba import njit

from ._series_kernels import linear_into, mul_into, pow_into

FIELD_PCRTBP = 0
FIELD_PCRTBP_VAR = 1
FIELD_PCRTBP_JET = 2
FIELD_HARMONIC = 3
FIELD_HARMONIC_JET = 4

SECTION_APSIS = 0
SECTION_PLANE = 1

EXTRA_NONE = -1
EXTRA_ANOMALY = 0

GUARD_NONE = -1
GUARD_SECONDARY_DISTANCE = 0


@njit(cache=True)
def _pcrtbp_rhs(y, mu, out):
    x = y[0]
    yy = y[1]
    px = y[2]
    py = y[3]
    u = x + mu
    w = x - 1.0 + mu
    y2 = yy * yy
    r1s = u * u + y2
    r2s = w * w + y2
    q1 = (1.0 - mu) / (r1s * math.sqrt(r1s))
    q2 = mu / (r2s * math.sqrt(r2s)) if mu != 0.0 else 0.0
    out[0] = px + yy
    out[1] = py - x
    out[2] = py - u * q1 - w * q2
    out[3] = -px - yy * (q1 + q2)


@njit(cache=True)
def _pcrtbp_var_rhs(y, mu, out):
    # First 4 entries are the state, the remaining 16 the state
    # transition matrix in row-major order, advanced by Phidot = A Phi.
    _pcrtbp_rhs(y, mu, out)
    x = y[0]
    yy = y[1]
    u = x + mu
    w = x - 1.0 + mu
    y2 = yy * yy
    r1s = u * u + y2
    r2s = w * w + y2
    r13 = r1s * math.sqrt(r1s)
    q1 = (1.0 - mu) / r13
    q2 = mu / (r2s * math.sqrt(r2s)) if mu != 0.0 else 0.0
    c1 = q1 / r1s
    c2 = q2 / r2s if mu != 0.0 else 0.0
    axx = -(q1 + q2) + 3.0 * (c1 * u * u + c2 * w * w)
    axy = 3.0 * yy * (c1 * u + c2 * w)
    ayy = -(q1 + q2) + 3.0 * y2 * (c1 + c2)
    for j in range(4):
        p0 = y[4 + j]
        p1 = y[8 + j]
        p2 = y[12 + j]
        p3 = y[16 + j]
        out[4 + j] = p1 + p2
        out[8 + j] = -p0 + p3
        out[12 + j] = axx * p0 + axy * p1 + p3
        out[16 + j] = axy * p0 + ayy * p1 - p2


@njit(cache=True)
def _pcrtbp_jet_rhs(y, mu, n, out):
    # y holds the four coefficient blocks (x, y, px, py), each of
    # length n, so the whole right-hand side is series arithmetic on
    # views. Truncation order is fixed by the caller through n.
    xs = y[0:n]
    ys = y[n:2 * n]
    pxs = y[2 * n:3 * n]
    pys = y[3 * n:4 * n]

    u = np.empty(n)
    w = np.empty(n)
    r1s = np.empty(n)
    r2s = np.empty(n)
    q1 = np.empty(n)
    q2 = np.empty(n)
    ta = np.empty(n)
    tb = np.empty(n)

    for i in range(n):
        u[i] = xs[i]
        w[i] = xs[i]
    u[0] += mu
    w[0] += mu - 1.0

    mul_into(r1s, u, u, n)
    mul_into(r2s, w, w, n)
    mul_into(ta, ys, ys, n)
    for i in range(n):
        r1s[i] += ta[i]
        r2s[i] += ta[i]

    pow_into(q1, r1s, -1.5, n)
    if mu != 0.0:
        pow_into(q2, r2s, -1.5, n)
    else:
        for i in range(n):
            q2[i] = 0.0

    for i in range(n):
        out[i] = pxs[i] + ys[i]
        out[n + i] = pys[i] - xs[i]

    mul_into(ta, u, q1, n)
    mul_into(tb, w, q2, n)
    one_mu = 1.0 - mu
    for i in range(n):
        out[2 * n + i] = pys[i] - one_mu * ta[i] - mu * tb[i]

    linear_into(tb, one_mu, q1, mu, q2, n)
    mul_into(ta, ys, tb, n)
    for i in range(n):
        out[3 * n + i] = -pxs[i] - ta[i]


@njit(cache=True)
def _harmonic_rhs(y, omega, out):
    out[0] = y[1]
    out[1] = -omega * omega * y[0]


@njit(cache=True)
def _harmonic_jet_rhs(y, omega, n, out):
    w2 = omega * omega
    for i in range(n):
        out[i] = y[n + i]
        out[n + i] = -w2 * y[i]


@njit(cache=True)
def rhs(kind, params, y, out):
    """Evaluate the selected field into out (same length as y)."""
    if kind == FIELD_PCRTBP:
        _pcrtbp_rhs(y, params[0], out)
    elif kind == FIELD_PCRTBP_VAR:
        _pcrtbp_var_rhs(y, params[0], out)
    elif kind == FIELD_PCRTBP_JET:
        _pcrtbp_jet_rhs(y, params[0], int(params[1]), out)
    elif kind == FIELD_HARMONIC:
        _harmonic_rhs(y, params[0], out)
    elif kind == FIELD_HARMONIC_JET:
        _harmonic_jet_rhs(y, params[0], int(params[1]), out)


@njit(cache=True)
def section_value(kind, params, y):
    """Scalar section function sigma(y)."""
    if kind == SECTION_APSIS:
        mu = params[0]
        return (y[0] + mu) * y[2] + y[1] * (y[3] + mu)
    # coordinate plane: y[index] - offset
    return y[int(params[0])] - params[1]


@njit(cache=True)
def section_rate(kind, params, field_kind, field_params, y):
    """Time derivative of sigma along the (forward) flow."""
    if kind == SECTION_APSIS:
        mu = params[0]
        f = np.empty(4)
        _pcrtbp_rhs(y, mu, f)
        return (y[2] * f[0] + (y[3] + mu) * f[1]
                + (y[0] + mu) * f[2] + y[1] * f[3])
    f = np.empty(y.shape[0])
    rhs(field_kind, field_params, y, f)
    return f[int(params[0])]


@njit(cache=True)
def true_anomaly(y, mu):
    """Anomaly of the osculating ellipse about the primary, in [0, 2pi).

    Returns -1.0 when the osculating eccentricity is too small for the
    periapse direction to mean anything.
    """
    rx = y[0] + mu
    ry = y[1]
    vx = y[2]
    vy = y[3] + mu
    gm = 1.0 - mu
    r = math.sqrt(rx * rx + ry * ry)
    h = rx * vy - ry * vx
    ex = (vy * h) / gm - rx / r
    ey = (-vx * h) / gm - ry / r
    ecc = math.sqrt(ex * ex + ey * ey)
    if ecc < 1e-12:
        return -1.0
    nu = math.atan2(ry, rx) - math.atan2(ey, ex)
    if h < 0.0:
        nu = -nu
    twopi = 2.0 * math.pi
    nu = nu % twopi
    if nu < 0.0:
        nu += twopi
    return nu


@njit(cache=True)
def extra_accept(kind, params, y):
    """Additional membership test applied after a sigma root is found."""
    if kind == EXTRA_ANOMALY:
        mu = params[0]
        target = params[1]
        window = params[2]
        nu = true_anomaly(y, mu)
        if nu < 0.0:
            return True
        twopi = 2.0 * math.pi
        d = abs(nu - target) % twopi
        if d > math.pi:
            d = twopi - d
        return d <= window
    return True


@njit(cache=True)
def guard_value(kind, params, y):
    """Trajectory diagnostic whose running minimum is reported."""
    if kind == GUARD_SECONDARY_DISTANCE:
        mu = params[0]
        dx = y[0] - 1.0 + mu
        return math.sqrt(dx * dx + y[1] * y[1])
    return math.inf

"""Planar circular restricted three-body problem in rotating coordinates.

State convention: z = (x, y, px, py) with positions in the rotating
barycentric frame (primary of mass 1-mu at (-mu, 0), secondary of mass
mu at (1-mu, 0), both distances and the rotation rate normalized to 1)
and momenta equal to the inertial velocity components. The Hamiltonian

    H = (px^2 + py^2)/2 + px*y - py*x - (1-mu)/r1 - mu/r2

is conserved; we report the Jacobi constant C = -2H.

Osculating two-body elements are taken about the primary: position
relative to it is (x+mu, y) and, because the primary circles the
barycenter, the relative inertial velocity is (px, py+mu). Periapse and
apoapse passages of that osculating ellipse are exactly the zeros of

    sigma(z) = (x+mu)*px + y*(py+mu),

increasing through zero at periapse, decreasing at apoapse. Since sigma
also vanishes at apses of the osculating ellipse about the secondary, a
section keeps only roots whose true anomaly sits within a small window
of the intended apse.

The dynamics commutes with the time-reversal mirror
(x, y, px, py) -> (x, -y, -px, py): flowing the mirrored state backward
mirrors the forward flow. Orbits crossing the x axis perpendicularly
are symmetric under it, which the orbit corrector exploits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import _field_kernels as fk
from .exceptions import DomainError
from .integrate import EventSpec, VectorField

__all__ = [
    "SystemModel",
    "OsculatingElements",
    "DelaunayCoords",
    "eom",
    "jacobi",
    "jacobi_gradient",
    "section_sigma",
    "osculating_elements",
    "elements_to_state",
    "delaunay",
    "mirror",
    "make_section",
    "SectionKind",
]

SectionKind = Literal["periapse", "apoapse"]

# half-width of the accepted true-anomaly window around the target apse
ANOMALY_WINDOW = 0.1

# osculating eccentricity below which apse angles are reported as zero
ECC_DEGENERATE = 1e-10


@dataclass(frozen=True)
class SystemModel:
    """A mass ratio with a name for reports and file tags."""

    mu: float
    name: str = "pcrtbp"

    def __post_init__(self):
        if not 0.0 <= self.mu < 0.5:
            raise DomainError(f"mass ratio {self.mu} outside [0, 0.5)")

    def field(self) -> VectorField:
        return VectorField(name=self.name, dimension=4,
                           kind=fk.FIELD_PCRTBP,
                           params=np.array([self.mu]),
                           jet_kind=fk.FIELD_PCRTBP_JET,
                           var_kind=fk.FIELD_PCRTBP_VAR,
                           state_dimension=4)


@dataclass(frozen=True)
class OsculatingElements:
    """Two-body elements about the primary; angles in [0, 2pi)."""

    a: float
    e: float
    g: float       # rotating-frame longitude of periapse
    nu: float      # true anomaly
    degenerate: bool = False


@dataclass(frozen=True)
class DelaunayCoords:
    """Rotating-frame Delaunay variables of the osculating motion."""

    L: float
    G: float
    ell: float     # mean anomaly
    g: float
    degenerate: bool = False


def eom(model: SystemModel, state: np.ndarray) -> np.ndarray:
    """Hamiltonian vector field at the state."""
    out = np.empty(4)
    fk.rhs(fk.FIELD_PCRTBP, np.array([model.mu]),
           np.asarray(state, dtype=np.float64), out)
    return out


def jacobi(model: SystemModel, state: np.ndarray) -> float:
    x, y, px, py = np.asarray(state, dtype=np.float64)
    mu = model.mu
    r1 = math.hypot(x + mu, y)
    r2 = math.hypot(x - 1.0 + mu, y)
    H = 0.5 * (px * px + py * py) + px * y - py * x - (1.0 - mu) / r1
    if mu != 0.0:
        H -= mu / r2
    return -2.0 * H


def jacobi_gradient(model: SystemModel, state: np.ndarray) -> np.ndarray:
    """d(jacobi)/d(state), used by correctors with an energy target."""
    x, y, px, py = np.asarray(state, dtype=np.float64)
    mu = model.mu
    u = x + mu
    w = x - 1.0 + mu
    r13 = math.hypot(u, y) ** 3
    q1 = (1.0 - mu) / r13
    q2 = mu / math.hypot(w, y) ** 3 if mu != 0.0 else 0.0
    return np.array([
        2.0 * py - 2.0 * (q1 * u + q2 * w),
        -2.0 * px - 2.0 * y * (q1 + q2),
        -2.0 * (px + y),
        -2.0 * (py - x),
    ])


def section_sigma(model: SystemModel, state: np.ndarray
                  ) -> tuple[float, float]:
    """The apse function sigma and its derivative along the flow."""
    z = np.asarray(state, dtype=np.float64)
    p = np.array([model.mu])
    s = fk.section_value(fk.SECTION_APSIS, p, z)
    sd = fk.section_rate(fk.SECTION_APSIS, p, fk.FIELD_PCRTBP, p, z)
    return float(s), float(sd)


def mirror(state: np.ndarray) -> np.ndarray:
    """Time-reversal symmetry (x, y, px, py) -> (x, -y, -px, py)."""
    x, y, px, py = np.asarray(state, dtype=np.float64)
    return np.array([x, -y, -px, py])


def osculating_elements(model: SystemModel, state: np.ndarray
                        ) -> OsculatingElements:
    """Elements of the instantaneous two-body motion about the primary.

    Defined for elliptic osculating motion only; raises DomainError on
    parabolic or hyperbolic states. For near-circular states (e below
    1e-10) the apse angles are meaningless and reported as zero with
    the degenerate flag set.
    """
    x, y, px, py = np.asarray(state, dtype=np.float64)
    mu = model.mu
    gm = 1.0 - mu
    rx, ry = x + mu, y
    vx, vy = px, py + mu
    r = math.hypot(rx, ry)
    if r == 0.0:
        raise DomainError("state at the primary")
    v2 = vx * vx + vy * vy
    inv_a = 2.0 / r - v2 / gm
    if inv_a <= 0.0:
        raise DomainError("osculating motion not elliptic")
    a = 1.0 / inv_a
    h = rx * vy - ry * vx
    ex = (vy * h) / gm - rx / r
    ey = (-vx * h) / gm - ry / r
    e = math.hypot(ex, ey)
    if e < ECC_DEGENERATE:
        return OsculatingElements(a=a, e=e, g=0.0, nu=0.0, degenerate=True)
    g = math.atan2(ey, ex) % (2.0 * math.pi)
    nu = math.atan2(ry, rx) - math.atan2(ey, ex)
    if h < 0.0:
        nu = -nu
    nu %= 2.0 * math.pi
    return OsculatingElements(a=a, e=e, g=g, nu=nu)


def elements_to_state(model: SystemModel, elements: OsculatingElements
                      ) -> np.ndarray:
    """Rotating-frame state of prograde elliptic elements.

    Inverse of osculating_elements on the prograde branch (positive
    angular momentum about the primary).
    """
    a, e, g, nu = elements.a, elements.e, elements.g, elements.nu
    if not (a > 0.0 and 0.0 <= e < 1.0):
        raise DomainError(f"need an ellipse, got a={a}, e={e}")
    mu = model.mu
    gm = 1.0 - mu
    p_semi = a * (1.0 - e * e)
    r = p_semi / (1.0 + e * math.cos(nu))
    theta = g + nu
    ct, st = math.cos(theta), math.sin(theta)
    h = math.sqrt(gm * p_semi)
    vr = (gm / h) * e * math.sin(nu)
    vt = h / r
    vx = vr * ct - vt * st
    vy = vr * st + vt * ct
    return np.array([r * ct - mu, r * st, vx, vy - mu])


def delaunay(model: SystemModel, state: np.ndarray) -> DelaunayCoords:
    """Rotating-frame Delaunay variables (L, G, ell, g).

    L = sqrt((1-mu) a); G is the angular momentum about the primary
    (equal to L*sqrt(1-e^2) on prograde orbits); ell is the mean
    anomaly from the eccentric anomaly; g the rotating periapse
    longitude. Angles in [0, 2pi).
    """
    el = osculating_elements(model, state)
    gm = 1.0 - model.mu
    L = math.sqrt(gm * el.a)
    if el.degenerate:
        return DelaunayCoords(L=L, G=L, ell=0.0, g=0.0, degenerate=True)
    x, y, px, py = np.asarray(state, dtype=np.float64)
    h = (x + model.mu) * (py + model.mu) - y * px
    # eccentric anomaly from the true anomaly, quadrant-safe
    E = 2.0 * math.atan2(math.sqrt(1.0 - el.e) * math.sin(el.nu / 2.0),
                         math.sqrt(1.0 + el.e) * math.cos(el.nu / 2.0))
    ell = (E - el.e * math.sin(E)) % (2.0 * math.pi)
    G = math.copysign(L * math.sqrt(1.0 - el.e * el.e), h)
    return DelaunayCoords(L=L, G=G, ell=ell, g=el.g)


def make_section(model: SystemModel, kind: SectionKind,
                 max_time: float = 4.0 * math.pi) -> EventSpec:
    """Periapse or apoapse section of the osculating motion.

    Periapse crossings have sigma increasing through zero and true
    anomaly near 0; apoapse the reverse, anomaly near pi. The anomaly
    window rejects sigma roots contributed by apses about the
    secondary. The running minimum of the distance to the secondary is
    tracked as the event guard.
    """
    if kind == "periapse":
        direction, target = 1, 0.0
    elif kind == "apoapse":
        direction, target = -1, math.pi
    else:
        raise DomainError(f"unknown section kind {kind!r}")
    mu = model.mu
    return EventSpec(
        sigma_kind=fk.SECTION_APSIS,
        sigma_params=np.array([mu]),
        direction=direction,
        extra_kind=fk.EXTRA_ANOMALY,
        extra_params=np.array([mu, target, ANOMALY_WINDOW]),
        guard_kind=fk.GUARD_SECONDARY_DISTANCE,
        guard_params=np.array([mu]),
        max_time=max_time,
    )

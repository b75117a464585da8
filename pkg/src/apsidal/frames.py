"""Circle-equation solvers and the adapted frame along an orbit.

Two scalar difference equations over a cyclic index k = 0..m-1 keep
appearing when normalizing structures along a periodic orbit:

  cohomological    u(k) - u(k+1) = b(k)        (needs sum b = 0)
  hyperbolic       alpha*u(k) - u(k+1) = b(k)  (needs alpha != 1)

both cyclic in k. The adapted frame packs the orbit's tangent,
conjugate, stable and unstable directions at each crossing into
matrices M(k) that conjugate every crossing-to-crossing flow
derivative to one shared block-diagonal normal form: a unipotent
2x2 block (shear by the mean period sensitivity) and the mean
hyperbolic multipliers,

    S_k M(k) = M(k+1 mod m) Lambda  for all k.

That uniformity is what lets invariant-manifold coefficients be solved
order by order with constant diagonal factors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .exceptions import UnsolvableError

log = logging.getLogger(__name__)

if TYPE_CHECKING:  # pragma: no cover
    from .orbits import PeriodicOrbitData, RescaledFrame

__all__ = [
    "solve_cohomological",
    "solve_hyperbolic",
    "AdaptedFrame",
    "build_adapted_frame",
    "symplectic_form",
]

#: canonical symplectic form J in (x, y, px, py) ordering
_J = np.block([[np.zeros((2, 2)), np.eye(2)],
               [-np.eye(2), np.zeros((2, 2))]])


def symplectic_form() -> np.ndarray:
    return _J.copy()


def solve_cohomological(b: np.ndarray) -> np.ndarray:
    """Solve u(k) - u(k+1 mod m) = b(k) with u(0) = 0.

    Solvable only when the b(k) sum to zero (the cyclic sum of the
    left side telescopes away); raises UnsolvableError otherwise.
    """
    b = np.asarray(b, dtype=np.float64)
    total = float(np.sum(b))
    if abs(total) > 1e-10:
        raise UnsolvableError(
            f"cohomological obstruction: sum b = {total:.3e} != 0")
    m = b.shape[0]
    u = np.zeros(m)
    for k in range(m - 1):
        u[k + 1] = u[k] - b[k]
    return u


def solve_hyperbolic(alpha: float, b: np.ndarray) -> np.ndarray:
    """Solve alpha*u(k) - u(k+1 mod m) = b(k), the cyclic system with
    a contraction factor.

    Unique solution for any b when alpha != 1. Computed by iterating
    the substitution that contracts: forward through the cycle for
    alpha < 1 (u(k) <- alpha*u(k-1) - b(k-1)), backward for alpha > 1
    (u(k) <- (b(k) + u(k+1))/alpha), starting from the zero sequence.
    One sweep contracts the error by min(alpha, 1/alpha) in sup-norm,
    so iteration stops when successive sweeps differ by under 1e-14 or
    after the sweep count that bound guarantees.
    """
    if alpha <= 0.0:
        raise UnsolvableError(f"alpha={alpha} must be positive")
    if abs(alpha - 1.0) < 1e-6:
        raise UnsolvableError(f"alpha={alpha} too close to 1")
    b = np.asarray(b, dtype=np.float64)
    m = b.shape[0]
    u = np.zeros(m)
    scale = max(1.0, float(np.max(np.abs(b))))
    rate = alpha if alpha < 1.0 else 1.0 / alpha
    sweeps = 2 * (int(math.ceil(math.log(1e-14) / math.log(rate))) + 2)
    for _ in range(sweeps):
        prev = u.copy()
        if alpha < 1.0:
            for k in range(m):
                u[k] = alpha * u[k - 1] - b[k - 1]
        else:
            for k in range(m - 1, -1, -1):
                u[k] = (b[k] + u[(k + 1) % m]) / alpha
        defect = float(np.max(np.abs(alpha * u - np.roll(u, -1) - b)))
        if defect <= 1e-13 * scale:
            break
        if float(np.max(np.abs(u - prev))) < 1e-16 * scale:
            break  # stalled at rounding level
    if defect > 1e-12 * scale:
        raise UnsolvableError(
            f"hyperbolic solve stalled at defect {defect:.3e}")
    return u


@dataclass(frozen=True)
class AdaptedFrame:
    """Per-crossing symplectic-ish frames with a shared normal form.

    columns of M[k]: tangent vbar_1, conjugate vbar_2, stable vbar_s,
    unstable vbar_u. Lambda is block diagonal: [[1, T_bar], [0, 1]] on
    the first pair, diag(lambda_s, lambda_u) on the second. T_k, B_k,
    C_k, D_k are the raw decomposition coefficients of the candidate
    conjugate direction under each leg (B_k should be ~1, a built-in
    consistency check on the symplectic structure); f1, f2, a_shift
    are the corrections that decouple it from the hyperbolic pair and
    even out the shear to T_bar.
    """

    M: np.ndarray        # (m, 4, 4)
    M_inv: np.ndarray    # (m, 4, 4)
    Lambda: np.ndarray   # (4, 4)
    T_bar: float
    lambda_s: float
    lambda_u: float
    T_k: np.ndarray      # (m,)
    B_k: np.ndarray
    C_k: np.ndarray
    D_k: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    a_shift: np.ndarray


def build_adapted_frame(orbit: "PeriodicOrbitData",
                        frame: "RescaledFrame") -> AdaptedFrame:
    """Complete the rescaled stable/unstable loops to full frames.

    The tangent loop vbar_1(k) = f(X(k)) is already equivariant with
    multiplier 1. A candidate conjugate direction J^{-1} vbar_1 /
    |vbar_1|^2 maps under S_k to a combination of all four directions
    at the next crossing; expressing it in that basis gives a shear
    coefficient T(k) onto the tangent plus leakage (C, D) onto the
    hyperbolic pair. The leakage is removed with one hyperbolic solve
    per side, and a final cohomological solve shifts the conjugate
    direction along the tangent so every crossing shears by the same
    mean T_bar.
    """
    from . import pcrtbp

    m = orbit.m
    model = orbit.model
    lam_s, lam_u = frame.lambda_s, frame.lambda_u

    v1 = np.vstack([pcrtbp.eom(model, orbit.X[k]) for k in range(m)])
    Jinv = -_J  # J^{-1} = -J
    w = np.vstack([(Jinv @ v1[k]) / float(v1[k] @ v1[k])
                   for k in range(m)])

    # coordinates of S_k w(k) in the next crossing's candidate basis
    T = np.empty(m)
    B = np.empty(m)
    Cc = np.empty(m)
    Dc = np.empty(m)
    for k in range(m):
        nxt = (k + 1) % m
        basis = np.column_stack([v1[nxt], w[nxt],
                                 frame.vbar_s[nxt], frame.vbar_u[nxt]])
        coeff = np.linalg.solve(basis, orbit.stms[k] @ w[k])
        T[k], B[k], Cc[k], Dc[k] = coeff

    # the hyperbolic corrections leave the tangent coefficient alone
    # (the stable/unstable loops carry no tangent component under the
    # legs), so T survives verbatim and only needs evening out
    f1 = solve_hyperbolic(lam_s, -Cc)
    f2 = solve_hyperbolic(lam_u, -Dc)
    v2 = w + f1[:, None] * frame.vbar_s + f2[:, None] * frame.vbar_u
    T_bar = float(np.mean(T))
    a = solve_cohomological(_centered(T_bar - T))
    vbar2 = v2 + a[:, None] * v1

    M = np.empty((m, 4, 4))
    M_inv = np.empty((m, 4, 4))
    for k in range(m):
        M[k] = np.column_stack([v1[k], vbar2[k],
                                frame.vbar_s[k], frame.vbar_u[k]])
        M_inv[k] = np.linalg.inv(M[k])
    log.debug("adapted frame: cond(M) = %s",
              [float(np.linalg.cond(Mk)) for Mk in M])
    Lam = np.array([[1.0, T_bar, 0.0, 0.0],
                    [0.0, 1.0, 0.0, 0.0],
                    [0.0, 0.0, lam_s, 0.0],
                    [0.0, 0.0, 0.0, lam_u]])
    return AdaptedFrame(M=M, M_inv=M_inv, Lambda=Lam, T_bar=T_bar,
                        lambda_s=lam_s, lambda_u=lam_u,
                        T_k=T, B_k=B, C_k=Cc, D_k=Dc,
                        f1=f1, f2=f2, a_shift=a)


def _centered(b: np.ndarray) -> np.ndarray:
    """Force an exact zero sum without moving any entry by more than
    the accumulated rounding."""
    out = np.asarray(b, dtype=np.float64).copy()
    out[-1] = -float(np.sum(out[:-1]))
    return out

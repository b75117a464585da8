"""Truncated Taylor series in one parameter, and jets of state vectors.

A Jet holds the coefficients (c_0, ..., c_d) of a polynomial
c_0 + c_1 s + ... + c_d s^d understood as a truncated Taylor expansion,
and supports the closed arithmetic needed to push such expansions
through the equations of motion: linear combinations, the Cauchy
product, division, and real powers. Division and powers use the usual
coefficient recurrences obtained by differentiating the defining
relation once and matching orders, so each costs O(d^2) like the
product.

A JetState bundles one series per state component and is what the
jet-transport integrator advances in time: the component series of the
flow image of a polynomial initial condition, truncated at the same
degree.

All operations require equal degrees (no silent broadcasting) and raise
DegreeMismatchError otherwise. Division requires a nonzero constant
term; real powers require a strictly positive one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _series_kernels as sk
from .exceptions import DegreeMismatchError, SeriesSingularityError

__all__ = [
    "Jet",
    "JetState",
    "jet_linear",
    "jet_mul",
    "jet_div",
    "jet_pow",
    "jet_truncate",
    "jet_eval",
]


@dataclass(frozen=True)
class Jet:
    """Coefficients of a degree-d truncated Taylor series."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim != 1 or c.size == 0:
            raise ValueError("jet coefficients must be a nonempty vector")
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1

    def __call__(self, s: float) -> float:
        return jet_eval(self, s)

    def __add__(self, other: "Jet") -> "Jet":
        return jet_linear(1.0, self, 1.0, other)

    def __sub__(self, other: "Jet") -> "Jet":
        return jet_linear(1.0, self, -1.0, other)

    def __mul__(self, other: "Jet") -> "Jet":
        return jet_mul(self, other)

    def __truediv__(self, other: "Jet") -> "Jet":
        return jet_div(self, other)


def _check_degrees(f: Jet, g: Jet) -> int:
    if f.degree != g.degree:
        raise DegreeMismatchError(
            f"jet degrees differ: {f.degree} vs {g.degree}")
    return f.degree + 1


def jet_linear(a: float, f: Jet, b: float, g: Jet) -> Jet:
    """a*f + b*g for scalars a, b."""
    n = _check_degrees(f, g)
    out = np.empty(n)
    sk.linear_into(out, float(a), f.coeffs, float(b), g.coeffs, n)
    return Jet(out)


def jet_mul(f: Jet, g: Jet) -> Jet:
    """Cauchy product truncated at the common degree."""
    n = _check_degrees(f, g)
    out = np.empty(n)
    sk.mul_into(out, f.coeffs, g.coeffs, n)
    return Jet(out)


def jet_div(f: Jet, g: Jet) -> Jet:
    """Series quotient f/g; g must have a nonzero constant term."""
    n = _check_degrees(f, g)
    if g.coeffs[0] == 0.0:
        raise SeriesSingularityError("division by jet with zero constant term")
    out = np.empty(n)
    sk.div_into(out, f.coeffs, g.coeffs, n)
    return Jet(out)


def jet_pow(f: Jet, alpha: float) -> Jet:
    """Real power f**alpha; f must have a positive constant term."""
    if f.coeffs[0] <= 0.0:
        raise SeriesSingularityError(
            f"jet power needs a positive constant term, got {f.coeffs[0]!r}")
    n = f.degree + 1
    out = np.empty(n)
    sk.pow_into(out, f.coeffs, float(alpha), n)
    return Jet(out)


def jet_truncate(f: Jet, degree: int) -> Jet:
    """Drop coefficients above the given degree (must not exceed f's)."""
    if degree < 0 or degree > f.degree:
        raise DegreeMismatchError(
            f"cannot truncate degree-{f.degree} jet to degree {degree}")
    return Jet(f.coeffs[:degree + 1].copy())


def jet_eval(f: Jet, s: float) -> float:
    """Horner evaluation of the truncated series at s."""
    acc = 0.0
    for c in f.coeffs[::-1]:
        acc = acc * s + c
    return acc


@dataclass(frozen=True)
class JetState:
    """One series per state component, all of the same degree.

    coeffs has shape (n_components, degree+1); row i holds the series
    of component i. The flat layout used by the integrator concatenates
    the rows.
    """

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim != 2 or c.size == 0:
            raise ValueError("JetState wants a (components, degree+1) array")
        object.__setattr__(self, "coeffs", c)

    @property
    def components(self) -> int:
        return self.coeffs.shape[0]

    @property
    def degree(self) -> int:
        return self.coeffs.shape[1] - 1

    def component(self, i: int) -> Jet:
        return Jet(self.coeffs[i].copy())

    def eval(self, s: float) -> np.ndarray:
        """State vector of the truncated expansion at parameter s."""
        out = np.zeros(self.components)
        for c in self.coeffs.T[::-1]:
            out *= s
            out += c
        return out

    def truncate(self, degree: int) -> "JetState":
        if degree < 0 or degree > self.degree:
            raise DegreeMismatchError(
                f"cannot truncate degree-{self.degree} state to {degree}")
        return JetState(self.coeffs[:, :degree + 1].copy())

    def flat(self) -> np.ndarray:
        return self.coeffs.ravel().copy()

    @staticmethod
    def from_flat(flat: np.ndarray, components: int) -> "JetState":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size % components:
            raise ValueError("flat jet state length not divisible by "
                             f"{components}")
        return JetState(flat.reshape(components, -1).copy())

    @staticmethod
    def from_polynomial(coeffs: np.ndarray) -> "JetState":
        """Build from an (degree+1, n_components) coefficient table,
        the layout the manifold series uses (orders down the rows)."""
        return JetState(np.asarray(coeffs, dtype=np.float64).T.copy())

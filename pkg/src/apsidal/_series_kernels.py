"""Coefficient kernels for truncated univariate power series.

These operate on plain float64 arrays of length n (coefficients of s^0
through s^(n-1)) so they can be called both from the friendly Jet class
and from inside the compiled jet-transport right-hand sides. None of the
kernels allow aliasing between the output and input buffers.
"""

import numpy as np
from numba import njit

__all__ = [
    "linear_into",
    "mul_into",
    "div_into",
    "pow_into",
]


@njit(cache=True)
def linear_into(out, a, f, b, g, n):
    """out = a*f + b*g for scalars a, b."""
    for i in range(n):
        out[i] = a * f[i] + b * g[i]


@njit(cache=True)
def mul_into(out, f, g, n):
    """Cauchy product truncated to n coefficients."""
    for i in range(n):
        acc = 0.0
        for j in range(i + 1):
            acc += f[j] * g[i - j]
        out[i] = acc


@njit(cache=True)
def div_into(out, f, g, n):
    """Series quotient f/g. Requires g[0] != 0 (checked by callers)."""
    inv = 1.0 / g[0]
    for i in range(n):
        acc = f[i]
        for j in range(i):
            acc -= out[j] * g[i - j]
        out[i] = acc * inv


@njit(cache=True)
def pow_into(out, f, alpha, n):
    """Real power f**alpha via the logarithmic-derivative recurrence.

    Uses f * (f**alpha)' = alpha * f' * f**alpha, which closes on the
    coefficients without ever forming logs. Requires f[0] > 0 (checked
    by callers; the dynamics only takes powers of squared distances).
    """
    out[0] = f[0] ** alpha
    inv = 1.0 / f[0]
    for i in range(1, n):
        acc = 0.0
        for j in range(1, i + 1):
            acc += ((alpha + 1.0) * j - i) * f[j] * out[i - j]
        out[i] = acc * inv / i

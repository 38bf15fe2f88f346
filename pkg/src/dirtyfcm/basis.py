"""Hierarchic 1D shape functions and Gauss rules.

The 1D basis on [-1, 1] consists of the two linear vertex functions plus
integrated-Legendre bubbles that vanish at both ends, so raising the
polynomial degree adds functions without touching existing ones.
"""

from __future__ import annotations

import numpy as np


def legendre_table(n: int, x: np.ndarray) -> np.ndarray:
    """P_0..P_n evaluated at x via the three-term recurrence; (n+1, len(x))."""
    x = np.asarray(x, dtype=float).reshape(-1)
    out = np.empty((n + 1, len(x)))
    out[0] = 1.0
    if n >= 1:
        out[1] = x
    for j in range(2, n + 1):
        out[j] = ((2 * j - 1) * x * out[j - 1] - (j - 1) * out[j - 2]) / j
    return out


def shape_1d(p: int, xi) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of the p+1 hierarchic functions at xi.

    Index 0 and 1 are the vertex functions (1 -+ xi)/2; index i >= 2 is the
    integrated Legendre function of degree i, zero at xi = +-1:

        N_i = (P_i - P_{i-2}) / sqrt(2 (2i - 1)),   N_i' = sqrt((2i-1)/2) P_{i-1}

    Returns arrays of shape (p+1, len(xi)).
    """
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if not ((xi >= -1.0 - 1e-12) & (xi <= 1.0 + 1e-12)).all():
        raise ValueError("xi outside [-1, 1]")
    vals = np.empty((p + 1, len(xi)))
    ders = np.empty((p + 1, len(xi)))
    vals[0] = 0.5 * (1.0 - xi)
    ders[0] = -0.5
    vals[1] = 0.5 * (1.0 + xi)
    ders[1] = 0.5
    if p >= 2:
        P = legendre_table(p, xi)
        for i in range(2, p + 1):
            scale = 1.0 / np.sqrt(2.0 * (2.0 * i - 1.0))
            vals[i] = (P[i] - P[i - 2]) * scale
            ders[i] = np.sqrt((2.0 * i - 1.0) / 2.0) * P[i - 1]
    return vals, ders


_GAUSS_CACHE: dict = {}


def gauss_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points and weights on [-1, 1]."""
    if n not in _GAUSS_CACHE:
        _GAUSS_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GAUSS_CACHE[n]


def triangle_gauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature on the unit triangle (0,0)-(1,0)-(0,1) by the collapsed
    square map; exact for polynomials of total degree 2n - 2.

    Returns barycentric-free reference coordinates (m, 2) and weights
    summing to 1/2.
    """
    x, w = gauss_rule(n)
    u = 0.5 * (x + 1.0)
    wu = 0.5 * w
    U, V = np.meshgrid(u, u, indexing="ij")
    WU, WV = np.meshgrid(wu, wu, indexing="ij")
    r = U.ravel()
    s = (V * U).ravel()           # collapse: v scaled into the triangle
    wgt = (WU * WV * U).ravel()   # Jacobian of the collapse is u
    return np.stack([r - s, s], axis=1), wgt

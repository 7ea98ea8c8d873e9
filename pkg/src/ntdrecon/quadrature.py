"""Quadrature rules on the reference tetrahedron and triangle (barycentric)."""

from functools import lru_cache

import numpy as np

from ._kernels_py import PHI, QA, QB  # noqa: F401  (re-exported 4-point rule)

# 4-point, degree-2 tet rule: points PHI[q] (barycentric), equal weights 1/4
TET4_BARY = PHI
TET4_WEIGHTS = np.full(4, 0.25)

# 3-point, degree-2 triangle rule (edge-interior points)
TRI3_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
TRI3_WEIGHTS = np.full(3, 1 / 3)


@lru_cache(maxsize=8)
def tet_collapsed_rule(order=4):
    """Gauss-Legendre product rule pulled back by the Duffy collapse.

    Returns barycentric points (P, 4) and weights (P,) summing to one.  Exact
    for polynomials of degree <= 2 * order - 3 on the tetrahedron.
    """
    x, w = np.polynomial.legendre.leggauss(order)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    a, b, c = np.meshgrid(x, x, x, indexing="ij")
    wa, wb, wc = np.meshgrid(w, w, w, indexing="ij")
    # (a, b, c) in the unit cube -> tet with vertices 0, e1, e2, e3
    s = a
    t = b * (1 - a)
    r = c * (1 - a) * (1 - b)
    jac = (1 - a) ** 2 * (1 - b)
    lam = np.stack([1 - s - t - r, s, t, r], axis=-1).reshape(-1, 4)
    wt = (wa * wb * wc * jac).ravel() * 6.0
    return lam, wt


@lru_cache(maxsize=8)
def tri_collapsed_rule(order=4):
    x, w = np.polynomial.legendre.leggauss(order)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    a, b = np.meshgrid(x, x, indexing="ij")
    wa, wb = np.meshgrid(w, w, indexing="ij")
    s = a
    t = b * (1 - a)
    lam = np.stack([1 - s - t, s, t], axis=-1).reshape(-1, 3)
    wt = (wa * wb * (1 - a)).ravel() * 2.0
    return lam, wt

"""Discrete Neumann-to-Dirichlet maps, linearisation checks and kernel probing."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .errors import DomainError, ResolutionError
from .solver import (
    NeumannData,
    SolverOptions,
    discretization,
    linear_solve,
    reaction_quad_values,
    schrodinger_matrix,
    solve_linear_schrodinger,
    solve_nonlinear,
)
from .tensors import metric_from_conductivity


@dataclass
class NtdMatrix:
    """Dense NtD matrix in the boundary nodal basis.

    Column j is the boundary trace produced by the Neumann datum equal to
    the j-th boundary hat function.  ``boundary_mass`` is the surface mass
    matrix restricted to the boundary vertices.
    """

    boundary_vertex_index: np.ndarray
    matrix: np.ndarray
    boundary_mass: object

    @property
    def dim(self):
        return len(self.boundary_vertex_index)

    def apply(self, values):
        return self.matrix @ np.asarray(values, dtype=float)

    def weighted_symmetry_residual(self):
        ml = self.boundary_mass @ self.matrix
        return float(np.linalg.norm(ml - ml.T) / np.linalg.norm(ml))

    def quadratic_form(self, g):
        g = np.asarray(g, dtype=float)
        return float(g @ (self.boundary_mass @ (self.matrix @ g)))

    def to_json_dict(self):
        return {
            "format": "ntdrecon-ntd",
            "dimension": self.dim,
            "vertex_map": self.boundary_vertex_index.tolist(),
            "values": self.matrix.ravel().tolist(),
        }

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex"] + [str(v) for v in self.boundary_vertex_index.tolist()])
            for v, row in zip(self.boundary_vertex_index.tolist(), self.matrix.tolist()):
                w.writerow([v] + [repr(x) for x in row])

    @classmethod
    def load_json(cls, path, mesh=None):
        with open(path) as fh:
            d = json.load(fh)
        n = d["dimension"]
        bm = None
        if mesh is not None:
            bv = mesh.boundary_vertices
            bm = discretization(mesh).boundary_mass[bv][:, bv]
        return cls(np.array(d["vertex_map"]), np.array(d["values"], dtype=float).reshape(n, n), bm)


class LinearNtdOperator:
    """Matrix-free linear NtD map of -div(gamma grad .) + q on one mesh.

    ``apply`` takes Neumann values per boundary vertex and returns the
    boundary trace; the system matrix is factorised once when the direct
    solver is selected.
    """

    def __init__(self, mesh, coeffs, q, opts=None):
        self.mesh = mesh
        self.coeffs = coeffs
        self.q = q
        self.opts = opts or SolverOptions()
        self.disc = discretization(mesh)
        self.a = schrodinger_matrix(mesh, coeffs, q)
        self._lu = None
        if self.opts.linear_solver == "direct":
            self._lu = spla.splu(self.a.tocsc())
        self.solves = 0

    @property
    def boundary_vertices(self):
        return self.mesh.boundary_vertices

    def solve_full(self, values):
        b = self.disc.boundary_load(NeumannData(np.asarray(values, dtype=float)))
        self.solves += 1
        if self._lu is not None:
            return self._lu.solve(b)
        return linear_solve(self.a, b, self.opts)[0]

    def apply(self, values):
        return self.solve_full(values)[self.mesh.boundary_vertices]

    def to_matrix(self, chunk=256):
        bv = self.mesh.boundary_vertices
        bm_full = self.disc.boundary_mass
        lu = self._lu or spla.splu(self.a.tocsc())
        m = len(bv)
        out = np.empty((m, m))
        for s in range(0, m, chunk):
            cols = bv[s:s + chunk]
            rhs = bm_full[:, cols].toarray()
            out[:, s:s + chunk] = lu.solve(rhs)[bv]
        return NtdMatrix(bv.copy(), out, bm_full[bv][:, bv].tocsr())


def ntd_nonlinear_apply(mesh, coeffs, g, opts=None, initial=None):
    """Boundary trace of the semilinear solution for Neumann datum g."""
    return solve_nonlinear(mesh, coeffs, g, opts, initial=initial).trace(mesh)


def ntd_linear_matrix(mesh, coeffs, q, opts=None):
    """Dense linear NtD matrix; one factorisation, one solve per boundary node."""
    opts = opts or SolverOptions()
    return LinearNtdOperator(mesh, coeffs, q, SolverOptions(**{**opts.__dict__, "linear_solver": "direct"})).to_matrix()


def background_potential(mesh, coeffs, g0=None, opts=None):
    """Solve the paced background problem; returns (u0 solution, q = 3 alpha u0^2).

    ``g0`` is Neumann data or a number (constant flux); it defaults to 1.
    """
    if g0 is None or np.isscalar(g0):
        g0 = NeumannData.constant(mesh, 1.0 if g0 is None else float(g0))
    sol = solve_nonlinear(mesh, coeffs.without_source(), g0, opts)
    return sol, reaction_quad_values(mesh, coeffs, sol.nodal_values)


def frechet_check(mesh, coeffs, g0, gstar, taus=(0.1, 0.05, 0.025, 0.0125), opts=None,
                  ratio_band=(0.35, 0.65)):
    """Finite-difference check of the derivative of the nonlinear NtD map.

    For each tau reports e(tau) = |(u_tau - u0)/tau - v0|_H1 where v0 solves
    the linear problem with q = 3 alpha u0^2 and datum g*.
    """
    opts = opts or SolverOptions()
    taus = [float(t) for t in taus]
    if any(t <= 0 for t in taus) or any(b >= a for a, b in zip(taus, taus[1:])):
        raise DomainError("taus must be positive and strictly decreasing")
    if g0.values is not None and (np.any(g0.values < 0) or not np.any(g0.values > 0)):
        raise DomainError("g0 must be nonnegative and not identically zero")
    disc = discretization(mesh)
    sol0 = solve_nonlinear(mesh, coeffs, g0, opts)
    u0 = sol0.nodal_values
    q = reaction_quad_values(mesh, coeffs, u0)
    v0 = solve_linear_schrodinger(mesh, coeffs, q, gstar, opts).nodal_values
    a_h1 = disc.laplace + disc.mass
    errors = []
    for t in taus:
        ut = solve_nonlinear(mesh, coeffs, g0 + gstar.scaled(t), opts, initial=u0).nodal_values
        d = (ut - u0) / t - v0
        errors.append(math.sqrt(max(float(d @ (a_h1 @ d)), 0.0)))
    # Newton residual tolerance seen through the difference quotient
    floors = [100.0 * opts.newton_tol / t for t in taus]
    ratios = [b / a if a > 0 else float("nan") for a, b in zip(errors, errors[1:])]
    above = [e > f for e, f in zip(errors, floors)]
    checked = [r for r, ok in zip(ratios, above[1:]) if ok]
    monotone = all(b <= a for (a, b), ok in zip(zip(errors, errors[1:]), above[1:]) if ok)
    if len(taus) >= 2 and all(e > 0 for e in errors):
        order = float(np.polyfit(np.log(taus), np.log(errors), 1)[0])
    else:
        order = float("nan")
    in_band = all(ratio_band[0] <= r <= ratio_band[1] for r in checked)
    return {
        "taus": taus,
        "errors": errors,
        "ratios": ratios,
        "noise_floor": floors,
        "checked_ratios": checked,
        "fitted_order": order,
        "monotone": monotone,
        "first_order": in_band,
        "failed": not monotone,
    }


# -- Neumann kernel probing --------------------------------------------

def _boundary_vertex_mask(mesh, patch):
    if patch is None:
        return np.ones(len(mesh.boundary_vertices), dtype=bool)
    on = np.zeros(mesh.n_vertices, dtype=bool)
    on[np.unique(mesh.facets[np.isin(mesh.facet_patch, np.atleast_1d(patch))])] = True
    return on[mesh.boundary_vertices]


def local_boundary_spacing(mesh, center, radius):
    """Mean length of boundary edges with an endpoint within ``radius``."""
    f = mesh.facets
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    p = mesh.vertices
    near = np.linalg.norm(p[e[:, 0]] - center, axis=1) <= radius
    if not np.any(near):
        return float("inf")
    return float(np.linalg.norm(p[e[near, 0]] - p[e[near, 1]], axis=1).mean())


def mollified_delta(mesh, patch, center, eps):
    """Normalised boundary bump (1 - (d/eps)^2)_+ around ``center``.

    d is the straight-line distance to the boundary vertex (a geodesic
    proxy at the scale of eps); the bump is scaled so that its integral
    against the surface mass matrix is one.
    """
    center = np.asarray(center, dtype=float)
    if eps <= 0:
        raise DomainError("eps must be positive")
    h = local_boundary_spacing(mesh, center, 2 * eps)
    if not eps > 1.5 * h:
        raise ResolutionError(f"eps={eps:.3g} under-resolved by boundary spacing {h:.3g}")
    bv = mesh.boundary_vertices
    d = np.linalg.norm(mesh.vertices[bv] - center, axis=1)
    bump = np.clip(1.0 - (d / eps) ** 2, 0.0, None) * _boundary_vertex_mask(mesh, patch)
    if np.count_nonzero(bump) < 3:
        raise ResolutionError("mollifier support contains fewer than three vertices")
    disc = discretization(mesh)
    mass = disc.boundary_mass[bv][:, bv]
    total = float(np.ones(len(bv)) @ (mass @ bump))
    return NeumannData(bump / total, nonnegative=True)


def surface_values(mesh, nodal, points, k=24):
    """Interpolate a P1 field at points lying on the boundary surface."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    k = min(k, len(mesh.facets))
    _, idx = mesh._locator_tree.query(pts, k=k)
    idx = np.atleast_2d(idx)
    out = np.empty(len(pts))
    for i, (p, cand) in enumerate(zip(pts, idx)):
        tri = mesh.vertices[mesh.facets[cand]]
        bary, dist = _closest_on_triangles(p, tri)
        j = int(np.argmin(dist))
        out[i] = bary[j] @ nodal[mesh.facets[cand[j]]]
    return out


def _closest_on_triangles(p, tri):
    """Barycentric coords of the projection of p on each triangle's plane,
    clipped to the triangle, and the resulting distance."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e0, e1, v = b - a, c - a, p - a
    d00 = np.einsum("ij,ij->i", e0, e0)
    d01 = np.einsum("ij,ij->i", e0, e1)
    d11 = np.einsum("ij,ij->i", e1, e1)
    d20 = np.einsum("ij,ij->i", v, e0)
    d21 = np.einsum("ij,ij->i", v, e1)
    den = d00 * d11 - d01 * d01
    s = (d11 * d20 - d01 * d21) / den
    t = (d00 * d21 - d01 * d20) / den
    bary = np.stack([1 - s - t, s, t], axis=1)
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1)[:, None]
    proj = np.einsum("ik,ikd->id", bary, tri)
    return bary, np.linalg.norm(proj - p, axis=1)


@dataclass
class KernelProbe:
    source_point: np.ndarray
    epsilon: float
    points: np.ndarray
    values: np.ndarray
    radii: np.ndarray | None = None
    directions: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise DomainError("epsilon must be positive")

    @property
    def samples(self):
        return list(zip(map(tuple, self.points), self.values))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "dx", "dy", "dz", "value"])
            r = self.radii if self.radii is not None else np.linalg.norm(self.points - self.source_point, axis=1)
            dirs = self.directions if self.directions is not None else np.zeros((len(r), 3))
            for ri, di, vi in zip(r, dirs, self.values):
                w.writerow([repr(float(ri)), *map(repr, map(float, di)), repr(float(vi))])


def probe_with_operator(operator, center, points, eps, patch=None):
    """Kernel samples N(x, center) ~ trace of the response to a mollified delta."""
    mesh = operator.mesh
    center = np.asarray(center, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    dist = np.linalg.norm(points - center, axis=1)
    if np.any(dist < 4 * eps * (1 - 1e-12)):
        raise DomainError("sample points must lie at least 4*eps from the source")
    g = mollified_delta(mesh, patch, center, eps)
    full = np.zeros(mesh.n_vertices)
    full[mesh.boundary_vertices] = operator.apply(g.values)
    return KernelProbe(center, eps, points, surface_values(mesh, full, points))


def probe_kernel(mesh, coeffs, q, source_point, xs, eps, opts=None, patch=None):
    """Approximate N(x, y') at boundary points xs from one linear solve."""
    op = LinearNtdOperator(mesh, coeffs, q, opts)
    return probe_with_operator(op, source_point, xs, eps, patch)


def half_space_kernel(gamma0, x, y):
    """Neumann kernel of div(gamma0 grad .) on {x3 > 0} with pole y on the plane.

    N = (1/2pi) (G (x - y) . (x - y))^(-1/2),  G = det(gamma0) gamma0^-1.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if abs(y[..., 2]).max() > 1e-12:
        raise DomainError("pole must lie on the plane x3 = 0")
    if np.any(x[..., 2] < -1e-12):
        raise DomainError("evaluation point must lie in the closed upper half space")
    d = x - y
    metric = metric_from_conductivity(gamma0).matrix
    quad = np.einsum("...i,ij,...j->...", d, metric, d)
    if np.any(quad <= 0):
        raise DomainError("kernel is singular at x = y'")
    return 1.0 / (2.0 * math.pi * np.sqrt(quad))

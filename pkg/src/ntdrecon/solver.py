"""P1 finite elements for the semilinear Neumann problem

    -div(gamma grad u) + alpha u^3 = f  in the domain,   gamma grad u . n = g  on the boundary,

and for the linear Schrodinger-type problem -div(gamma grad v) + q v = f.
"""

from __future__ import annotations

import csv
import json
import math
import weakref
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .errors import ConvergenceError, DomainError, SingularProblemError, ValidationError
from .mesh import INSIDE_D, TetMesh
from .quadrature import TRI3_BARY, TRI3_WEIGHTS, tet_collapsed_rule
from .tensors import SpdTensor3, ellipticity_check

_CUBIC_PHI = kernels.PHI


@dataclass
class SolverOptions:
    newton_tol: float = 1e-9
    newton_max_iter: int = 50
    linear_tol: float = 1e-10
    linear_max_iter: int = 20000
    damping: bool = True
    max_halvings: int = 20
    picard_iters: int = 5
    linear_solver: str = "cg"  # "cg" (Jacobi-preconditioned) or "direct"

    def __post_init__(self):
        if self.newton_tol <= 0 or self.linear_tol <= 0:
            raise DomainError("tolerances must be positive")
        if self.newton_max_iter < 1 or self.linear_max_iter < 1:
            raise DomainError("iteration caps must be >= 1")
        if self.linear_solver not in ("cg", "direct"):
            raise DomainError(f"unknown linear solver {self.linear_solver!r}")


@dataclass(frozen=True)
class Coefficients:
    """Piecewise-constant conductivity, ionic coefficient and optional source.

    ``alpha`` is a scalar or one value per tet.  ``source`` is either a
    per-vertex array (interpolated, integrated exactly) or a callable
    ``f(points) -> values`` evaluated at quadrature points.
    """

    gamma_outside: SpdTensor3
    gamma_inside: SpdTensor3 | None = None
    alpha: float | np.ndarray = 1.0
    source: object = None

    def gamma_per_tet(self, mesh):
        inside = self.gamma_inside if self.gamma_inside is not None else self.gamma_outside
        out = np.empty((len(mesh.tets), 3, 3))
        out[:] = self.gamma_outside.matrix
        out[mesh.region == INSIDE_D] = inside.matrix
        return out

    def alpha_per_tet(self, mesh):
        a = np.asarray(self.alpha, dtype=float)
        if a.ndim == 0:
            return np.full(len(mesh.tets), float(a))
        if a.shape != (len(mesh.tets),):
            raise DomainError("alpha must be a scalar or one value per tet")
        return a

    def validate(self, lambda0, alpha0=None):
        for name, g in (("gamma_outside", self.gamma_outside), ("gamma_inside", self.gamma_inside)):
            if g is not None and not ellipticity_check(g, lambda0):
                raise ValidationError(f"{name} violates the ellipticity bound lambda0={lambda0}")
        a = np.asarray(self.alpha, dtype=float)
        if np.any(a <= 0):
            raise ValidationError("alpha must be strictly positive")
        if alpha0 is not None:
            if not (0 < alpha0 < 1):
                raise ValidationError(f"alpha0 must lie in (0, 1), got {alpha0}")
            if np.any(a < alpha0) or np.any(a > 1 / alpha0):
                raise ValidationError(f"alpha outside [alpha0, 1/alpha0] for alpha0={alpha0}")
        return self

    def with_gamma_inside(self, gamma):
        return Coefficients(self.gamma_outside, gamma, self.alpha, self.source)

    def without_source(self):
        return Coefficients(self.gamma_outside, self.gamma_inside, self.alpha, None)


@dataclass(frozen=True)
class NeumannData:
    """Boundary current density.

    Either ``values`` per boundary vertex (aligned with
    ``mesh.boundary_vertices``, a P1 surface field) or ``function(points,
    normals)`` evaluated at facet quadrature points.
    """

    values: np.ndarray | None = None
    function: object = None
    nonnegative: bool = False

    def __post_init__(self):
        if self.values is not None:
            v = np.asarray(self.values, dtype=float)
            if not np.all(np.isfinite(v)):
                raise DomainError("Neumann data must be finite")
            object.__setattr__(self, "values", v)

    @classmethod
    def zero(cls, mesh):
        return cls(np.zeros(len(mesh.boundary_vertices)))

    @classmethod
    def constant(cls, mesh, value=1.0, patches=None):
        vals = np.full(len(mesh.boundary_vertices), float(value))
        if patches is not None:
            vals = vals * patch_indicator(mesh, patches)
        return cls(vals, nonnegative=value >= 0)

    @classmethod
    def from_vertex_function(cls, mesh, f):
        return cls(np.asarray(f(mesh.vertices[mesh.boundary_vertices]), dtype=float))

    def is_zero(self):
        return self.values is not None and not np.any(self.values)

    def scaled(self, s):
        if self.values is None:
            fn = self.function
            return NeumannData(function=lambda x, n: s * fn(x, n))
        return NeumannData(s * self.values)

    def __add__(self, other):
        if self.values is None or other.values is None:
            raise DomainError("only vertex-valued Neumann data can be added")
        return NeumannData(self.values + other.values)


def patch_indicator(mesh, patches):
    """1.0 on boundary vertices touching a facet of the given patches."""
    patches = np.atleast_1d(patches)
    sel = np.isin(mesh.facet_patch, patches)
    on = np.zeros(mesh.n_vertices, dtype=bool)
    on[np.unique(mesh.facets[sel])] = True
    return on[mesh.boundary_vertices].astype(float)


@dataclass
class FemSolution:
    nodal_values: np.ndarray
    norms: dict
    stats: dict = field(default_factory=dict)

    @property
    def min_value(self):
        return self.norms["min"]

    def trace(self, mesh):
        return self.nodal_values[mesh.boundary_vertices]


# -- discretisation ----------------------------------------------------

class Discretization:
    """Per-mesh cached geometry, sparsity pattern and constant matrices."""

    def __init__(self, mesh: TetMesh):
        self.mesh = mesh
        self.n = mesh.n_vertices
        self.grads, self.vol = kernels.p1_gradients(mesh.vertices, mesh.tets)
        if np.any(self.vol <= 0):
            raise DomainError("mesh has non-positive tet volumes")
        t = mesh.tets
        rows = np.repeat(t, 4, axis=1).ravel()
        cols = np.tile(t, (1, 4)).ravel()
        key = rows * self.n + cols
        uniq, self._scatter = np.unique(key, return_inverse=True)
        self._scatter = self._scatter.ravel()
        self._indices = (uniq % self.n).astype(np.int32)
        counts = np.bincount(uniq // self.n, minlength=self.n)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self._laplace = None
        self._mass = None
        self._bmass = None
        self._riesz_diag = None

    def to_csr(self, local):
        data = np.bincount(self._scatter, weights=local.ravel(), minlength=len(self._indices))
        return sp.csr_matrix((data, self._indices.copy(), self._indptr.copy()), shape=(self.n, self.n))

    def stiffness(self, gammas):
        return self.to_csr(kernels.stiffness_local(self.grads, self.vol, gammas))

    def quad_mass(self, qvals):
        return self.to_csr(kernels.quad_mass_local(qvals, self.vol))

    @property
    def laplace(self):
        if self._laplace is None:
            eye = np.broadcast_to(np.eye(3), (len(self.vol), 3, 3))
            self._laplace = self.stiffness(eye)
        return self._laplace

    @property
    def mass(self):
        if self._mass is None:
            base = (np.ones((4, 4)) + np.eye(4)) / 20.0
            self._mass = self.to_csr(self.vol[:, None, None] * base[None])
        return self._mass

    @property
    def boundary_mass(self):
        """P1 surface mass matrix (full vertex numbering)."""
        if self._bmass is None:
            f = self.mesh.facets
            a = self.mesh.facet_areas
            base = (np.ones((3, 3)) + np.eye(3)) / 12.0
            vals = a[:, None, None] * base[None]
            r = np.repeat(f, 3, axis=1).ravel()
            c = np.tile(f, (1, 3)).ravel()
            self._bmass = sp.coo_matrix((vals.ravel(), (r, c)), shape=(self.n, self.n)).tocsr()
        return self._bmass

    def interpolate_tets(self, u):
        return u[self.mesh.tets]

    def quad_values(self, u):
        """P1 field at the 4-point quadrature nodes, shape (M, 4)."""
        return u[self.mesh.tets] @ _CUBIC_PHI.T

    def boundary_load(self, g: NeumannData):
        if g.values is not None:
            full = np.zeros(self.n)
            full[self.mesh.boundary_vertices] = g.values
            return self.boundary_mass @ full
        f = self.mesh.facets
        pts = np.einsum("qk,fkd->fqd", TRI3_BARY, self.mesh.vertices[f])
        nrm = np.broadcast_to(self.mesh.facet_normals[:, None, :], pts.shape)
        vals = np.asarray(g.function(pts.reshape(-1, 3), nrm.reshape(-1, 3))).reshape(len(f), 3)
        contrib = (vals * TRI3_WEIGHTS) @ TRI3_BARY * self.mesh.facet_areas[:, None]
        return np.bincount(f.ravel(), weights=contrib.ravel(), minlength=self.n)

    def source_load(self, source):
        if source is None:
            return np.zeros(self.n)
        if callable(source):
            pts = np.einsum("qk,mkd->mqd", _CUBIC_PHI, self.mesh.vertices[self.mesh.tets])
            vals = np.asarray(source(pts.reshape(-1, 3))).reshape(-1, 4)
            contrib = (vals * (self.vol / 4.0)[:, None]) @ _CUBIC_PHI
            return np.bincount(self.mesh.tets.ravel(), weights=contrib.ravel(), minlength=self.n)
        return self.mass @ np.asarray(source, dtype=float)

    def dual_norm(self, r, rtol=1e-8):
        """sqrt(r^T A^{-1} r) with A the H1 Gram matrix (Laplace + mass)."""
        if not np.any(r):
            return 0.0
        a = self.laplace + self.mass
        if self._riesz_diag is None:
            self._riesz_diag = 1.0 / a.diagonal()
        prec = spla.LinearOperator(a.shape, matvec=lambda x: self._riesz_diag * x)
        z, _ = spla.cg(a, r, rtol=rtol, maxiter=5000, M=prec)
        return math.sqrt(max(float(r @ z), 0.0))


_DISC_CACHE: "weakref.WeakKeyDictionary[TetMesh, Discretization]" = weakref.WeakKeyDictionary()


def discretization(mesh):
    d = _DISC_CACHE.get(mesh)
    if d is None:
        d = Discretization(mesh)
        _DISC_CACHE[mesh] = d
    return d


def linear_solve(a, b, opts, x0=None):
    """Solve a x = b; returns (x, iterations).  CG with Jacobi preconditioning
    unless ``opts.linear_solver == "direct"``."""
    if opts.linear_solver == "direct":
        return spla.spsolve(a.tocsc(), b), 1
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    d = a.diagonal()
    dinv = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 1.0)
    prec = spla.LinearOperator(a.shape, matvec=lambda x: dinv * x)
    its = [0]

    def count(_):
        its[0] += 1

    x, info = spla.cg(a, b, x0=x0, rtol=opts.linear_tol, maxiter=opts.linear_max_iter, M=prec, callback=count)
    if info != 0:
        res = np.linalg.norm(b - a @ x) / bnorm
        raise ConvergenceError(f"CG did not converge (relative residual {res:.2e})", history=[res])
    return x, its[0]


# -- public operations -------------------------------------------------

def assemble_stiffness(mesh, coeffs):
    """Symmetric PSD matrix of int gamma grad u . grad phi."""
    return discretization(mesh).stiffness(coeffs.gamma_per_tet(mesh))


def assemble_mass(mesh):
    return discretization(mesh).mass


def boundary_mass(mesh):
    return discretization(mesh).boundary_mass


def reaction_quad_values(mesh, coeffs, u):
    """Linearised reaction 3 alpha u^2 at the quadrature nodes, shape (M, 4)."""
    disc = discretization(mesh)
    _, qvals, _ = kernels.cubic_terms(disc.interpolate_tets(np.asarray(u, float)),
                                      coeffs.alpha_per_tet(mesh), disc.vol)
    return qvals


def energy(mesh, coeffs, g, u, _parts=None):
    """E(u) = 1/2 int gamma grad u.grad u + 1/4 int alpha u^4 - <g, u> - int f u."""
    disc = discretization(mesh)
    u = np.asarray(u, dtype=float)
    k = _parts["K"] if _parts else assemble_stiffness(mesh, coeffs)
    load = _parts["load"] if _parts else disc.boundary_load(g) + disc.source_load(coeffs.source)
    _, _, quart = kernels.cubic_terms(disc.interpolate_tets(u), coeffs.alpha_per_tet(mesh), disc.vol)
    return float(0.5 * u @ (k @ u) + quart.sum() - load @ u)


def norms(mesh, u):
    """L2, H1 seminorm, H1, L4 (4-point rule), Linf and minimum of a P1 field."""
    disc = discretization(mesh)
    u = np.asarray(u, dtype=float)
    l2 = math.sqrt(max(float(u @ (disc.mass @ u)), 0.0))
    semi = math.sqrt(max(float(u @ (disc.laplace @ u)), 0.0))
    uq = disc.quad_values(u)
    l4 = float(((uq**4).sum(axis=1) * disc.vol / 4.0).sum()) ** 0.25
    return {
        "l2": l2,
        "h1_semi": semi,
        "h1": math.hypot(l2, semi),
        "l4": l4,
        "linf": float(np.max(np.abs(u))) if u.size else 0.0,
        "min": float(np.min(u)) if u.size else 0.0,
    }


def solve_nonlinear(mesh, coeffs, g, opts=None, initial=None):
    """Damped Newton for the semilinear Neumann problem.

    The energy E is strictly convex for alpha > 0, so Newton steps are
    halved until E does not increase.  At u = 0 the Jacobian is the pure
    Neumann stiffness (constants in its kernel); that step is replaced by the
    exact minimiser of E along the constant direction.
    """
    opts = opts or SolverOptions()
    disc = discretization(mesh)
    alpha = coeffs.alpha_per_tet(mesh)
    if np.any(alpha <= 0):
        raise DomainError("alpha must be strictly positive")
    k = assemble_stiffness(mesh, coeffs)
    load = disc.boundary_load(g) + disc.source_load(coeffs.source)
    parts = {"K": k, "load": load}
    u = np.zeros(disc.n) if initial is None else np.array(initial, dtype=float)

    def state(v):
        res, qv, quart = kernels.cubic_terms(disc.interpolate_tets(v), alpha, disc.vol)
        r = k @ v + np.bincount(mesh.tets.ravel(), weights=res.ravel(), minlength=disc.n) - load
        e = float(0.5 * v @ (k @ v) + quart.sum() - load @ v)
        return r, qv, e

    r, qv, e = state(u)
    history, energies = [], [e]
    lin_its = 0
    picard_used = False
    it = 0
    while True:
        rn = disc.dual_norm(r)
        history.append(rn)
        if rn <= opts.newton_tol:
            break
        if it >= opts.newton_max_iter:
            raise ConvergenceError(
                f"Newton did not converge in {opts.newton_max_iter} iterations (residual {rn:.3e})",
                history=history,
            )
        it += 1
        if not np.any(u):
            # exact line minimisation along constants: c^3 int alpha = int load
            c = np.cbrt(load.sum() / float((alpha * disc.vol).sum()))
            if c != 0.0:
                u = np.full(disc.n, c)
                r, qv, e = state(u)
                energies.append(e)
                continue
        jac = k + disc.quad_mass(qv)
        du, n_its = linear_solve(jac, -r, opts)
        lin_its += n_its
        t = 1.0
        accepted = False
        for _ in range(opts.max_halvings + 1):
            cand = u + t * du
            r_c, qv_c, e_c = state(cand)
            if not opts.damping or e_c <= e + 1e-13 * max(1.0, abs(e)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if picard_used:
                raise ConvergenceError("damped Newton step failed to decrease the energy", history=history)
            picard_used = True
            for _ in range(opts.picard_iters):
                # lagged reaction: (K + alpha u_k^2 M) u = load
                a = k + disc.quad_mass(qv / 3.0)
                u, n_its = linear_solve(a, load, opts, x0=u)
                lin_its += n_its
                r, qv, e = state(u)
                energies.append(e)
            continue
        u, r, qv, e = cand, r_c, qv_c, e_c
        energies.append(e)

    stats = {
        "newton_iterations": it,
        "final_residual": history[-1],
        "residual_history": history,
        "energy_history": energies,
        "linear_iterations": lin_its,
        "picard_fallback": picard_used,
    }
    return FemSolution(u, norms(mesh, u), stats)


def _as_quad_values(mesh, q):
    q = np.asarray(q, dtype=float)
    if q.ndim == 0:
        return np.full((len(mesh.tets), 4), float(q))
    if q.shape == (mesh.n_vertices,):
        return q[mesh.tets] @ _CUBIC_PHI.T
    if q.shape == (len(mesh.tets), 4):
        return q
    raise DomainError("q must be a scalar, per-vertex array, or (n_tets, 4) quadrature values")


def schrodinger_matrix(mesh, coeffs, q):
    disc = discretization(mesh)
    qq = _as_quad_values(mesh, q)
    if np.any(qq < 0):
        raise DomainError("q must be nonnegative")
    if not np.any(qq * disc.vol[:, None] > 0):
        raise SingularProblemError("q vanishes identically: constants lie in the kernel")
    return assemble_stiffness(mesh, coeffs) + disc.quad_mass(qq)


def solve_linear_schrodinger(mesh, coeffs, q, g, opts=None, source=None):
    """Solve -div(gamma grad v) + q v = f with gamma grad v . n = g.

    ``q`` may be a scalar, a per-vertex field, or values at the 4-point
    quadrature nodes (as returned by :func:`reaction_quad_values`).
    """
    opts = opts or SolverOptions()
    disc = discretization(mesh)
    a = schrodinger_matrix(mesh, coeffs, q)
    b = disc.boundary_load(g) + disc.source_load(source)
    v, its = linear_solve(a, b, opts)
    res = float(np.linalg.norm(a @ v - b) / max(np.linalg.norm(b), 1e-300))
    return FemSolution(v, norms(mesh, v), {"linear_iterations": its, "relative_residual": res})


def check_energy_inequality(mesh, coeffs, g, u, lambda0, alpha0, newton_tol=1e-9):
    """Check lambda0 |grad u|^2 + alpha0 |u|_4^4 <= int g u + slack."""
    disc = discretization(mesh)
    u = np.asarray(u, dtype=float)
    nm = norms(mesh, u)
    lhs = lambda0 * nm["h1_semi"] ** 2 + alpha0 * nm["l4"] ** 4
    rhs = float(disc.boundary_load(g) @ u + disc.source_load(coeffs.source) @ u)
    slack = 10.0 * newton_tol * (1.0 + nm["h1"])
    return {"lhs": lhs, "rhs": rhs, "slack": slack, "holds": bool(lhs <= rhs + slack)}


# -- manufactured solutions and error norms ---------------------------

def error_norms(mesh, u_h, exact, exact_grad, order=4):
    """L2 and H1-seminorm errors against an analytic field (collapsed Gauss rule)."""
    disc = discretization(mesh)
    lam, w = tet_collapsed_rule(order)
    pts = np.einsum("pk,mkd->mpd", lam, mesh.vertices[mesh.tets])
    uh = u_h[mesh.tets] @ lam.T
    gh = np.einsum("mk,mkd->md", u_h[mesh.tets], disc.grads)
    ue = np.asarray(exact(pts.reshape(-1, 3))).reshape(uh.shape)
    ge = np.asarray(exact_grad(pts.reshape(-1, 3))).reshape(pts.shape)
    l2 = float((((uh - ue) ** 2) @ w * disc.vol).sum())
    h1 = float(((((gh[:, None, :] - ge) ** 2).sum(axis=2)) @ w * disc.vol).sum())
    return math.sqrt(l2), math.sqrt(h1)


@dataclass(frozen=True)
class Manufactured:
    """u*(x) = offset + amp * sin(k . x) with flux and source for constant gamma."""

    k: tuple = (1.3, -0.7, 0.9)
    amp: float = 1.0
    offset: float = 0.0

    def u(self, x):
        return self.offset + self.amp * np.sin(x @ np.asarray(self.k))

    def grad(self, x):
        k = np.asarray(self.k)
        return self.amp * np.cos(x @ k)[:, None] * k[None, :]

    def flux(self, gamma):
        g = gamma.matrix

        def fn(x, n):
            return np.einsum("id,de,ie->i", self.grad(x), g, n)

        return fn

    def source(self, gamma, alpha=None, q=None):
        k = np.asarray(self.k)
        kgk = float(k @ gamma.matrix @ k)

        def fn(x):
            base = kgk * self.amp * np.sin(x @ k)  # -div(gamma grad u*)
            u = self.u(x)
            if alpha is not None:
                base = base + alpha * u**3
            if q is not None:
                base = base + q * u
            return base

        return fn


def convergence_rates(hs, errors):
    hs = np.asarray(hs, float)
    errors = np.asarray(errors, float)
    return np.log(errors[:-1] / errors[1:]) / np.log(hs[:-1] / hs[1:])


# -- export ------------------------------------------------------------

def solution_to_csv(mesh, sol, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex", "x", "y", "z", "value"])
        for i, (p, v) in enumerate(zip(mesh.vertices.tolist(), sol.nodal_values.tolist())):
            w.writerow([i, repr(p[0]), repr(p[1]), repr(p[2]), repr(v)])


def solution_summary(sol):
    stats = {k: v for k, v in sol.stats.items()}
    return {"norms": dict(sol.norms), "stats": stats}


def solution_to_json(sol, path):
    with open(path, "w") as fh:
        json.dump(solution_summary(sol), fh, indent=2)


def options_dict(opts):
    return asdict(opts)

"""Boundary determination: Neumann kernel samples -> tangential metrics ->
full metric -> conductivity, on the outer boundary and on the inclusion."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ExtractionFailedError, NtdError, tag_stage
from .mesh import extract_inclusion_mesh, refine_near, select_probe_frame
from .ntd import LinearNtdOperator, background_potential, probe_with_operator
from .solver import Coefficients, NeumannData, SolverOptions, discretization, solve_nonlinear
from .tensors import (
    SpdTensor3,
    TangentialMetric,
    conductivity_from_metric,
    metric_from_conductivity,
    principal_axis_angle,
    probe_bases,
    recover_full_metric,
    relative_frobenius_error,
)

CANONICAL_DIRECTIONS = np.array([[1.0, 0.0], [0.0, 1.0], [1 / math.sqrt(2), 1 / math.sqrt(2)]])


def fit_inverse_r(radii, values, nuisance=True):
    """Least-squares fit of N(r) ~ c / r (+ b ln(1/r) + a when ``nuisance``).

    ``values`` may carry several samples per radius in its last axis;
    ``radii`` is either one value per row or one per sample.
    Returns (c, coefficients, relative residual).
    """
    radii = np.asarray(radii, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if radii.shape == values.shape:
        r = radii.ravel()
    else:
        r = np.repeat(radii.ravel(), values.shape[1])
    y = values.ravel()
    cols = [1.0 / r]
    if nuisance:
        cols += [np.log(1.0 / r), np.ones_like(r)]
    a = np.stack(cols, axis=1)
    # column scaling keeps the normal equations well conditioned
    scale = np.abs(a).max(axis=0)
    coef, *_ = np.linalg.lstsq(a / scale, y, rcond=None)
    coef = coef / scale
    resid = float(np.linalg.norm(a @ coef - y) / max(np.linalg.norm(y), 1e-300))
    return float(coef[0]), coef, resid


def extract_tangential_metric(values, directions=CANONICAL_DIRECTIONS, radii=None,
                              base_point=None, basis=None, nuisance=True):
    """Tangential metric from kernel samples along tangent directions.

    ``values[d]`` holds kernel samples at ``radii`` along direction d (given
    as coefficients in ``basis``); ``radii`` may also hold the actual
    distance of every sample, shaped like ``values``.  Each direction gives c_d from a fit in
    1/r, and q(xi) = (2 pi c)^-2 = g(xi, xi); the 2x2 metric is the
    least-squares solution over all directions (polarisation for the three
    canonical ones).
    """
    directions = np.asarray(directions, dtype=float)
    if len(directions) < 3:
        raise ExtractionFailedError("need at least three tangent directions", stage="extract")
    values = np.asarray(values, dtype=float)
    radii = None if radii is None else np.asarray(radii, dtype=float)
    per_sample = radii is not None and radii.shape == values.shape
    if radii is None or (radii.shape[1] if per_sample else len(radii)) < 4:
        raise ExtractionFailedError("need at least four radii per direction", stage="extract")
    cs, fits = [], []
    for d in range(len(directions)):
        rd = radii[d] if per_sample else radii
        c, coef, res = fit_inverse_r(rd, values[d], nuisance)
        c_plain, _, res_plain = fit_inverse_r(rd, values[d], nuisance=False)
        if not math.isfinite(c) or c <= 0:
            raise ExtractionFailedError(f"fitted 1/r coefficient is not positive ({c:.3g})", stage="extract")
        cs.append(c)
        fits.append({"c": c, "coef": coef.tolist(), "residual": res,
                     "c_no_nuisance": c_plain, "residual_no_nuisance": res_plain})
    qv = (2.0 * math.pi * np.asarray(cs)) ** -2
    xi = directions / np.linalg.norm(directions, axis=1)[:, None]
    design = np.stack([xi[:, 0] ** 2, 2 * xi[:, 0] * xi[:, 1], xi[:, 1] ** 2], axis=1)
    (g11, g12, g22), *_ = np.linalg.lstsq(design, qv, rcond=None)
    g = np.array([[g11, g12], [g12, g22]])
    if g11 <= 0 or np.linalg.det(g) <= 0:
        raise ExtractionFailedError("tangential metric is not positive definite", stage="extract")
    if basis is None:
        basis = (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    if base_point is None:
        base_point = np.zeros(3)
    return TangentialMetric(np.asarray(base_point, float), tuple(basis), g), fits


@dataclass
class ProbeOptions:
    """Sampling ladder and fit settings for kernel probing.

    ``radii``: tangent-plane distances; ``eps``: mollifier radius (defaults
    to min(radii) / 4); ``mode``: "fem" probes the NtD access, "exact"
    injects closed-form half-space kernel values of ``exact_gamma``.
    ``refine_h``: when set, the mesh is refined around the three frame
    points down to this edge length, growing by ``refine_grading`` times
    the distance.  ``background_flux``: constant g0 of the background solve
    (a weak flux keeps q = 3 alpha u0^2 small, so the kernel is not screened
    at the probing radii).
    """

    radii: tuple = (0.2, 0.145, 0.105, 0.076, 0.055, 0.04)
    eps: float | None = None
    nuisance: bool = True
    symmetric: bool = True
    mode: str = "fem"
    exact_gamma: SpdTensor3 | None = None
    patch: int | None = None
    refine_h: float | None = 0.006
    refine_grading: float = 0.25
    background_flux: float = 0.01

    @classmethod
    def dyadic(cls, r_max, levels=4, **kw):
        return cls(radii=tuple(r_max / 2**k for k in range(levels)), **kw)

    @property
    def epsilon(self):
        return self.eps if self.eps is not None else min(self.radii) / 4.0


def _tangent_bases(frame, exact_tangency):
    """Global-coordinate tangent bases at P1, P2, P3.

    With ``exact_tangency`` the nominal frame vectors are projected onto the
    facet tangent planes (P2's first vector is only tangent when delta(P2)
    vanishes); otherwise they are used as given.
    """
    rot = frame.rotation
    local = probe_bases(frame.alpha, frame.beta, frame.delta)
    out = []
    for k, (b1, b2) in enumerate(local):
        v1, v2 = rot.T @ b1, rot.T @ b2
        if exact_tangency and frame.normals:
            n = np.asarray(frame.normals[k], dtype=float)
            if k == 1:
                v2 = v2 - (v2 @ n) * n
                v2 /= np.linalg.norm(v2)
                v1 = v1 - (v1 @ n) * n - (v1 @ v2) * v2
                v1 /= np.linalg.norm(v1)
            else:
                v1 = v1 - (v1 @ n) * n
                v1 /= np.linalg.norm(v1)
                v2 = v2 - (v2 @ n) * n - (v2 @ v1) * v1
                v2 /= np.linalg.norm(v2)
        out.append((v1, v2))
    return out


def _sample_points(mesh, point, normal, dirs, radii, symmetric):
    """Boundary points at tangent-plane offsets r * xi from ``point``.

    Returns array (n_dir, n_radii, n_sign, 3).  Without a mesh the points lie
    in the plane itself.
    """
    signs = (1.0, -1.0) if symmetric else (1.0,)
    pts = np.empty((len(dirs), len(radii), len(signs), 3))
    for d, xi in enumerate(dirs):
        for i, r in enumerate(radii):
            for s, sg in enumerate(signs):
                origin = point + sg * r * xi
                if mesh is None:
                    pts[d, i, s] = origin
                else:
                    pts[d, i, s] = mesh.locate_on_surface(origin, normal)[0]
    return pts


def probe_tangential_metric(point, normal, basis, probe_opts, mesh=None, operator=None):
    """Sample the kernel around one boundary point and extract its tangential metric."""
    v1, v2 = basis
    dirs = [CANONICAL_DIRECTIONS[j, 0] * v1 + CANONICAL_DIRECTIONS[j, 1] * v2 for j in range(3)]
    radii = np.asarray(probe_opts.radii, dtype=float)
    point = np.asarray(point, dtype=float)
    if probe_opts.mode == "exact":
        gmat = metric_from_conductivity(probe_opts.exact_gamma).matrix
        pts = _sample_points(None, point, normal, dirs, radii, probe_opts.symmetric)
        d = pts - point
        vals = 1.0 / (2 * math.pi * np.sqrt(np.einsum("...i,ij,...j->...", d, gmat, d)))
    else:
        pts = _sample_points(mesh, point, normal, dirs, radii, probe_opts.symmetric)
        flat = pts.reshape(-1, 3)
        probe = probe_with_operator(operator, point, flat, probe_opts.epsilon, probe_opts.patch)
        vals = probe.values.reshape(pts.shape[:-1])
        # chord lengths to the located surface points, not tangent-plane offsets
        radii = np.linalg.norm(pts - point, axis=-1)
    tm, fits = extract_tangential_metric(vals, CANONICAL_DIRECTIONS, radii, point, (v1, v2), probe_opts.nuisance)
    return tm, fits, vals


def recover_boundary_tensor(mesh, ntd_access, frame, probe_opts=None, return_report=False):
    """Estimate the constant conductivity next to a nonflat boundary patch.

    Probes the kernel at the three frame points, extracts their tangential
    metrics, recovers the full metric in the local frame of P1, rotates it
    back to global coordinates and converts it to a conductivity.
    """
    probe_opts = probe_opts or ProbeOptions()
    exact = probe_opts.mode == "exact"
    bases = _tangent_bases(frame, exact_tangency=not exact)
    points = (frame.p1, frame.p2, frame.p3)
    normals = frame.normals
    gt, stage_fits = [], []
    for k in range(3):
        try:
            tm, fits, _ = probe_tangential_metric(points[k], normals[k], bases[k], probe_opts, mesh, ntd_access)
        except NtdError as exc:
            raise tag_stage(exc, f"probe[P{k + 1}]")
        except Exception as exc:  # noqa: BLE001 - surface stage for unexpected failures
            raise NtdError(f"probe at P{k + 1} failed: {exc}", stage=f"probe[P{k + 1}]") from exc
        gt.append(tm.g_tilde)
        stage_fits.append(fits)
    try:
        metric_local, consistency = recover_full_metric(gt[0], gt[1], gt[2], frame, return_diagnostics=True)
    except NtdError as exc:
        raise tag_stage(exc, "algebra")
    rot = frame.rotation
    metric = SpdTensor3.from_matrix(rot.T @ metric_local.matrix @ rot)
    gamma = conductivity_from_metric(metric)
    if not return_report:
        return gamma
    return gamma, {
        "tangential_metrics": [g.tolist() for g in gt],
        "fits": stage_fits,
        "consistency": consistency,
        "frame": frame.quality(),
        "metric_global": metric.to_list(),
    }


@dataclass
class ReconstructionReport:
    recovered_gamma0: SpdTensor3
    recovered_gamma1: SpdTensor3 | None = None
    diagnostics: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {
            "recovered_gamma0": self.recovered_gamma0.to_list(),
            "recovered_gamma1": None if self.recovered_gamma1 is None else self.recovered_gamma1.to_list(),
            "diagnostics": self.diagnostics,
            "errors": self.errors,
        }

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def compare_to_truth(estimate, truth):
    return {
        "relative_frobenius": relative_frobenius_error(estimate, truth),
        "principal_axis_deg": principal_axis_angle(estimate, truth),
    }


def _frame_on(mesh, patch, seed_point, search_radius, probe_opts, refine_mesh=None):
    """Select a probe frame, optionally refining ``refine_mesh`` around it.

    ``refine_mesh`` is the mesh that gets refined (the parent when probing
    an inclusion surface); the frame is then re-selected near the coarse
    frame points of the refined surface.  Returns (refined mesh or None, frame).
    """
    try:
        frame = select_probe_frame(mesh, patch, seed_point, search_radius=search_radius)
    except NtdError as exc:
        raise tag_stage(exc, "frame")
    if probe_opts.mode == "exact" or probe_opts.refine_h is None:
        return None, frame
    pts = (frame.p1, frame.p2, frame.p3)
    try:
        fine = refine_near(refine_mesh if refine_mesh is not None else mesh, pts,
                           probe_opts.refine_h, probe_opts.refine_grading)
    except NtdError as exc:
        raise tag_stage(exc, "refine")
    surf = fine if refine_mesh is None else extract_inclusion_mesh(fine)
    try:
        frame = select_probe_frame(surf, patch, frame.p1, search_radius=search_radius,
                                   targets=pts[1:], target_radius=search_radius / 4)
    except NtdError as exc:
        raise tag_stage(exc, "frame")
    return fine, frame


def _background_flux(g0, probe_opts):
    return probe_opts.background_flux if g0 is None else g0


def outer_boundary_reconstruction(mesh, coeffs, seed_point, probe_opts=None, g0=None, opts=None,
                                  patch=1, search_radius=0.8, truth=None):
    """Step 1 of the uniqueness argument, run on synthetic forward data.

    ``g0`` (Neumann data or a constant) overrides the probe options'
    background flux; mesh-bound data cannot be combined with refinement.
    """
    probe_opts = probe_opts or ProbeOptions()
    fine, frame = _frame_on(mesh, patch, seed_point, search_radius, probe_opts)
    if fine is not None:
        mesh = fine
    diagnostics = {"n_tets": int(len(mesh.tets)), "n_vertices": int(mesh.n_vertices)}
    if probe_opts.mode == "exact":
        op = None
    else:
        try:
            u0, q = background_potential(mesh, coeffs, _background_flux(g0, probe_opts), opts)
        except NtdError as exc:
            raise tag_stage(exc, "background")
        diagnostics["background_min"] = u0.norms["min"]
        op = LinearNtdOperator(mesh, coeffs, q, opts)
    gamma, diag = recover_boundary_tensor(mesh, op, frame, probe_opts, return_report=True)
    diagnostics.update(diag)
    report = ReconstructionReport(gamma, diagnostics=diagnostics)
    if truth is not None:
        report.errors["gamma0"] = compare_to_truth(gamma, truth)
    return report


def inner_ntd_operator(parent, coeffs, g0=None, opts=None):
    """Linear NtD access on the inclusion surface.

    The potential q = 3 alpha u0^2 comes from a nonlinear background solve on
    the parent mesh and is restricted to the inclusion tets; the conductivity
    inside is ``coeffs.gamma_inside``.
    """
    sub = extract_inclusion_mesh(parent)
    u0, q = background_potential(parent, coeffs, g0, opts)
    gamma1 = coeffs.gamma_inside or coeffs.gamma_outside
    alpha = np.asarray(coeffs.alpha, dtype=float)
    inner_alpha = alpha if alpha.ndim == 0 else alpha[sub.parent_tet]
    inner = Coefficients(gamma1, None, inner_alpha)
    return LinearNtdOperator(sub, inner, q[sub.parent_tet], opts), u0


def inner_ntd_matrix(parent, coeffs, g0=None, opts=None):
    op, _ = inner_ntd_operator(parent, coeffs, g0, opts)
    return op.to_matrix()


def recover_inclusion_tensor(parent, coeffs, seed_point, probe_opts=None, g0=None, opts=None,
                             search_radius=0.8, truth=None):
    """Step 4: repeat the boundary determination on the inclusion surface.

    ``coeffs.gamma_inside`` only enters through the synthetic inner NtD data.
    """
    probe_opts = probe_opts or ProbeOptions()
    try:
        sub = extract_inclusion_mesh(parent)
    except NtdError as exc:
        raise tag_stage(exc, "frame")
    fine, frame = _frame_on(sub, None, seed_point, search_radius, probe_opts, refine_mesh=parent)
    if fine is not None:
        parent = fine
    op = None
    if probe_opts.mode != "exact":
        try:
            op, _ = inner_ntd_operator(parent, coeffs, _background_flux(g0, probe_opts), opts)
        except NtdError as exc:
            raise tag_stage(exc, "inner-ntd")
        sub = op.mesh
    gamma, diag = recover_boundary_tensor(sub, op, frame, probe_opts, return_report=True)
    diag.update({"n_tets": int(len(parent.tets)), "n_vertices": int(parent.n_vertices)})
    report = ReconstructionReport(coeffs.gamma_outside, gamma, diagnostics=diag)
    if truth is not None:
        report.errors["gamma1"] = compare_to_truth(gamma, truth)
    return report


def face_currents(mesh):
    """One unit current per boundary patch, zero elsewhere."""
    from .solver import patch_indicator

    return [NeumannData(patch_indicator(mesh, p), nonnegative=True) for p in mesh.patches()]


def distinguishability(mesh, coeffs_a, coeffs_b, currents, opts=None):
    """Largest relative L2(boundary) gap between the two nonlinear NtD responses."""
    disc = discretization(mesh)
    bv = mesh.boundary_vertices
    bmass = disc.boundary_mass[bv][:, bv]

    def l2(v):
        return math.sqrt(max(float(v @ (bmass @ v)), 0.0))

    rows = []
    for j, g in enumerate(currents):
        sa = solve_nonlinear(mesh, coeffs_a, g, opts)
        sb = solve_nonlinear(mesh, coeffs_b, g, opts)
        ta, tb = sa.trace(mesh), sb.trace(mesh)
        diff = l2(ta - tb)
        rows.append({
            "current": j,
            "gap_ab": diff / l2(ta) if l2(ta) > 0 else 0.0,
            "gap_ba": diff / l2(tb) if l2(tb) > 0 else 0.0,
            "exterior_background_gap": _exterior_gap(mesh, sa.nodal_values, sb.nodal_values),
        })
    return {
        "gap": max(r["gap_ab"] for r in rows),
        "gap_reverse": max(r["gap_ba"] for r in rows),
        "per_current": rows,
    }


def _exterior_gap(mesh, ua, ub):
    """Relative sup difference of two potentials on vertices away from D."""
    from .mesh import INSIDE_D

    touch = np.zeros(mesh.n_vertices, dtype=bool)
    touch[mesh.tets[mesh.region == INSIDE_D].ravel()] = True
    out = ~touch
    if not np.any(out):
        return 0.0
    den = max(float(np.abs(ua[out]).max()), 1e-300)
    return float(np.abs(ua[out] - ub[out]).max() / den)


def stage_rows(report):
    """Flatten per-stage fit diagnostics into CSV rows."""
    rows = []
    for k, fits in enumerate(report.diagnostics.get("fits", [])):
        for d, f in enumerate(fits):
            rows.append({"point": f"P{k + 1}", "direction": d, "c": f["c"], "residual": f["residual"],
                         "c_no_nuisance": f["c_no_nuisance"], "residual_no_nuisance": f["residual_no_nuisance"]})
    return rows


def write_stage_csv(report, path):
    rows = stage_rows(report)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["point", "direction", "c", "residual", "c_no_nuisance",
                                           "residual_no_nuisance"])
        w.writeheader()
        w.writerows(rows)


DEFAULT_OPTIONS = SolverOptions()

"""Configuration-driven experiment runner.

Each subcommand reads one JSON config, writes ``report.json``, stage CSVs
and ``provenance.json`` into the output directory, and exits with

    0 success, 2 validation error, 3 solver failure, 4 reconstruction failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import kernels
from .errors import (
    ConvergenceError,
    DomainError,
    ExtractionFailedError,
    NonflatAssumptionError,
    NtdError,
    RecoveryFailedError,
    SearchFailedError,
    SingularProblemError,
    ValidationError,
    tag_stage,
)
from .mesh import (
    INSIDE_D,
    AxisBox,
    Ellipsoid,
    build_ball_mesh,
    build_box_mesh,
    load_json,
    read_gmsh,
    refine_near,
    tag_inclusion,
)
from .ntd import (
    background_potential,
    frechet_check,
    local_boundary_spacing,
    mollified_delta,
    ntd_linear_matrix,
    probe_kernel,
)
from .reconstruct import (
    ProbeOptions,
    distinguishability,
    face_currents,
    outer_boundary_reconstruction,
    recover_inclusion_tensor,
    write_stage_csv,
)
from .solver import (
    Coefficients,
    Manufactured,
    NeumannData,
    SolverOptions,
    check_energy_inequality,
    convergence_rates,
    error_norms,
    patch_indicator,
    solve_linear_schrodinger,
    solve_nonlinear,
    solution_to_csv,
)
from .tensors import SpdTensor3, rotation_about

from . import __version__

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_RECONSTRUCTION = 4

SUBCOMMANDS = ("forward", "mms", "ntd", "frechet", "probe", "recover-boundary",
               "recover-inclusion", "distinguish")

DEFAULTS = {
    "geometry": {"kind": "box", "extent": [1.0, 1.0, 1.0], "n": 8, "radius": 1.0,
                 "refinement": 3, "center": [0.0, 0.0, 0.0], "path": None, "inclusion": None},
    "coefficients": {"gamma0": 1.0, "gamma1": None, "alpha": 1.0, "lambda0": 0.5, "alpha0": 0.5},
    "boundary_data": {"kind": "constant", "value": 1.0},
    "solver": {},
    "mms": {"ns": [4, 8, 16], "extent": [1.0, 1.0, 1.0], "k": [1.3, -0.7, 0.9], "amp": 1.0,
            "offset": 0.5, "q": 1.0},
    "frechet": {"taus": [0.1, 0.05, 0.025, 0.0125], "directions": 3},
    "probe": {"source": None, "direction": [1.0, 0.0, 0.0], "radii": None, "eps": None,
              "patch": None, "refine_h": 0.01, "refine_grading": 0.25},
    "reconstruct": {"seed_point": None, "search_radius": 0.8, "radii": None, "eps": None,
                    "refine_h": 0.006, "refine_grading": 0.25, "background_flux": 0.01,
                    "mode": "fem", "truth": True},
    "distinguish": {"contrasts": [1.5, 2.0, 3.0], "reference": None},
}


# -- config -------------------------------------------------------------

def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(raw):
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    return _merge(DEFAULTS, raw)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def parse_tensor(spec, name="tensor"):
    """Tensor from a scalar (times I), 3 diagonal values, 6 entries, a 3x3
    matrix, or {"diag": [...], "rotate": {"axis": [...], "degrees": d}}."""
    try:
        if isinstance(spec, dict):
            t = parse_tensor(spec.get("diag", spec.get("matrix", 1.0)), name)
            rot = spec.get("rotate")
            if rot:
                t = t.rotated(rotation_about(rot.get("axis", [0, 0, 1]), rot["degrees"]))
            return t
        if np.isscalar(spec):
            return SpdTensor3.identity().scaled(float(spec))
        arr = np.asarray(spec, dtype=float)
        if arr.shape == (3,):
            return SpdTensor3.diag(*arr)
        if arr.shape == (6,):
            return SpdTensor3(tuple(arr))
        if arr.shape == (3, 3):
            return SpdTensor3.from_matrix(arr)
    except (DomainError, KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{name}: {exc}") from exc
    raise ValidationError(f"{name}: cannot parse tensor {spec!r}")


def build_coefficients(cfg):
    c = cfg["coefficients"]
    lambda0, alpha0 = c["lambda0"], c["alpha0"]
    if not (isinstance(lambda0, (int, float)) and 0 < lambda0 <= 1):
        raise ValidationError(f"lambda0 must lie in (0, 1], got {lambda0}")
    g0 = parse_tensor(c["gamma0"], "gamma0")
    g1 = None if c["gamma1"] is None else parse_tensor(c["gamma1"], "gamma1")
    coeffs = Coefficients(g0, g1, float(c["alpha"]))
    coeffs.validate(lambda0, alpha0)
    return coeffs


def _inclusion_shape(spec):
    if spec is None:
        return None
    try:
        if spec.get("kind", "ellipsoid") == "box":
            return AxisBox(spec["lo"], spec["hi"])
        axes = spec.get("semi_axes")
        if axes is None:
            axes = [spec["radius"]] * 3
        return Ellipsoid(spec["center"], axes, spec.get("rotation", np.eye(3).tolist()))
    except (KeyError, DomainError) as exc:
        raise ValidationError(f"inclusion: {exc}") from exc


def build_mesh(cfg):
    g = cfg["geometry"]
    kind = g["kind"]
    try:
        if kind == "box":
            mesh = build_box_mesh(g["extent"], g["n"])
        elif kind == "ball":
            mesh = build_ball_mesh(g["radius"], g["refinement"], g["center"], n=g.get("cells"))
        elif kind == "import":
            path = g["path"]
            if path is None:
                raise ValidationError("geometry.path is required for import")
            mesh = read_gmsh(path) if str(path).endswith(".msh") else load_json(path)
        else:
            raise ValidationError(f"unknown geometry kind {kind!r}")
    except DomainError as exc:
        raise ValidationError(f"geometry: {exc}") from exc
    shape = _inclusion_shape(g["inclusion"])
    if shape is not None:
        try:
            mesh = tag_inclusion(mesh, shape)
        except DomainError as exc:
            raise ValidationError(f"inclusion: {exc}") from exc
    return mesh


def build_solver_options(cfg):
    try:
        return SolverOptions(**cfg["solver"])
    except (TypeError, DomainError) as exc:
        raise ValidationError(f"solver: {exc}") from exc


def build_boundary_data(cfg, mesh):
    b = cfg["boundary_data"]
    kind = b.get("kind", "constant")
    if kind == "constant":
        return NeumannData.constant(mesh, b.get("value", 1.0))
    if kind == "patches":
        vals = np.zeros(len(mesh.boundary_vertices))
        for p, v in b["values"].items():
            vals += float(v) * patch_indicator(mesh, [int(p)])
        return NeumannData(vals, nonnegative=bool(np.all(vals >= 0)))
    if kind == "delta":
        return mollified_delta(mesh, b.get("patch"), b["center"], b["eps"])
    raise ValidationError(f"unknown boundary data kind {kind!r}")


def validate_config(cfg, command):
    """All checks that must pass before any solve."""
    if command not in SUBCOMMANDS:
        raise ValidationError(f"unknown subcommand {command!r}")
    build_coefficients(cfg)
    build_solver_options(cfg)
    _inclusion_shape(cfg["geometry"]["inclusion"])
    if command == "frechet":
        taus = cfg["frechet"]["taus"]
        if any(t <= 0 for t in taus) or any(a <= b for a, b in zip(taus, taus[1:])):
            raise ValidationError("taus must be positive and decreasing")
    if command == "distinguish":
        lam, a0 = _lambda_alpha(cfg)
        for s in cfg["distinguish"]["contrasts"]:
            build_coefficients(cfg).with_gamma_inside(parse_tensor(s, "contrast")).validate(lam, a0)
    if command == "mms" and len(cfg["mms"]["ns"]) < 2:
        raise ValidationError("mms needs at least two mesh sizes")


# -- subcommands ----------------------------------------------------------

def _write_csv(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in fields})


def _lambda_alpha(cfg):
    c = cfg["coefficients"]
    return c["lambda0"], c["alpha0"]


def cmd_forward(cfg, out, rng):
    mesh, coeffs, opts = build_mesh(cfg), build_coefficients(cfg), build_solver_options(cfg)
    g = build_boundary_data(cfg, mesh)
    sol = solve_nonlinear(mesh, coeffs, g, opts)
    lam, a0 = _lambda_alpha(cfg)
    ineq = check_energy_inequality(mesh, coeffs, g, sol.nodal_values, lam, a0, opts.newton_tol)
    solution_to_csv(mesh, sol, out / "solution.csv")
    _write_csv(out / "residuals.csv",
               [{"iteration": i, "residual": r} for i, r in enumerate(sol.stats["residual_history"])],
               ["iteration", "residual"])
    return {"mesh": {"n_vertices": mesh.n_vertices, "n_tets": len(mesh.tets)},
            "norms": sol.norms, "stats": sol.stats, "energy_inequality": ineq, "c0": sol.norms["min"]}


def cmd_mms(cfg, out, rng):
    m = cfg["mms"]
    coeffs, opts = build_coefficients(cfg), build_solver_options(cfg)
    gamma = coeffs.gamma_outside
    man = Manufactured(tuple(m["k"]), m["amp"], m["offset"])
    rows, table = [], {"semilinear": [], "linear": []}
    for n in m["ns"]:
        mesh = build_box_mesh(m["extent"], n)
        h = mesh.max_tet_diameter
        flux = NeumannData(function=man.flux(gamma))
        c_nl = Coefficients(gamma, None, coeffs.alpha, man.source(gamma, alpha=coeffs.alpha))
        u = solve_nonlinear(mesh, c_nl, flux, opts).nodal_values
        table["semilinear"].append((h, *error_norms(mesh, u, man.u, man.grad)))
        c_l = Coefficients(gamma, None, coeffs.alpha)
        v = solve_linear_schrodinger(mesh, c_l, m["q"], flux, opts, source=man.source(gamma, q=m["q"]))
        table["linear"].append((h, *error_norms(mesh, v.nodal_values, man.u, man.grad)))
    rates = {}
    for solver, entries in table.items():
        hs, l2, h1 = (np.array(x) for x in zip(*entries))
        r2, r1 = convergence_rates(hs, l2), convergence_rates(hs, h1)
        rates[solver] = {"l2": r2.tolist(), "h1": r1.tolist()}
        for i, (n, (h, e2, e1)) in enumerate(zip(m["ns"], entries)):
            rows.append({"solver": solver, "n": n, "h": h, "l2_error": e2, "h1_error": e1,
                         "l2_rate": r2[i - 1] if i else None, "h1_rate": r1[i - 1] if i else None})
    _write_csv(out / "mms.csv", rows, ["solver", "n", "h", "l2_error", "h1_error", "l2_rate", "h1_rate"])
    return {"rates": rates, "rows": rows}


def cmd_ntd(cfg, out, rng):
    mesh, coeffs, opts = build_mesh(cfg), build_coefficients(cfg), build_solver_options(cfg)
    u0, q = background_potential(mesh, coeffs, build_boundary_data(cfg, mesh), opts)
    mat = ntd_linear_matrix(mesh, coeffs, q, opts)
    mat.save_json(out / "ntd.json")
    mat.save_csv(out / "ntd.csv")
    return {"dimension": mat.dim, "weighted_symmetry_residual": mat.weighted_symmetry_residual(),
            "background_min": u0.norms["min"], "diagonal_min": float(np.diag(mat.matrix).min())}


def _random_direction(mesh, rng):
    """Smooth random Neumann datum: a random quadratic in the coordinates."""
    c0, c1, c2 = rng.standard_normal(), rng.standard_normal(3), rng.standard_normal((3, 3))
    x = mesh.vertices[mesh.boundary_vertices]
    x = x - x.mean(axis=0)
    return NeumannData(c0 + x @ c1 + np.einsum("ij,jk,ik->i", x, c2, x))


def cmd_frechet(cfg, out, rng):
    mesh, coeffs, opts = build_mesh(cfg), build_coefficients(cfg), build_solver_options(cfg)
    g0 = build_boundary_data(cfg, mesh)
    f = cfg["frechet"]
    runs, rows = [], []
    for j in range(int(f["directions"])):
        res = frechet_check(mesh, coeffs, g0, _random_direction(mesh, rng), tuple(f["taus"]), opts)
        runs.append(res)
        for i, tau in enumerate(res["taus"]):
            rows.append({"direction": j, "tau": tau, "error": res["errors"][i],
                         "ratio": res["ratios"][i - 1] if i else None})
    _write_csv(out / "frechet.csv", rows, ["direction", "tau", "error", "ratio"])
    return {"runs": runs, "first_order": all(r["first_order"] for r in runs)}


def cmd_probe(cfg, out, rng):
    mesh, coeffs, opts = build_mesh(cfg), build_coefficients(cfg), build_solver_options(cfg)
    p = cfg["probe"]
    bv = mesh.vertices[mesh.boundary_vertices]
    src = p["source"]
    if src is None:
        # top of the domain, above the centre of its bounding box
        lo, hi = bv.min(axis=0), bv.max(axis=0)
        src = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), hi[2]]
    src = bv[np.argmin(np.linalg.norm(bv - np.asarray(src, dtype=float), axis=1))]
    if p["refine_h"] is not None:
        mesh = refine_near(mesh, [src], p["refine_h"], p["refine_grading"])
    _, q = background_potential(mesh, coeffs, build_boundary_data(cfg, mesh), opts)
    normal = mesh.facet_normals[mesh._locator_tree.query(src)[1]]
    d = np.asarray(p["direction"], dtype=float)
    d = d - (d @ normal) * normal
    if np.linalg.norm(d) < 1e-8:
        raise ValidationError("probe direction is parallel to the boundary normal")
    d /= np.linalg.norm(d)
    eps = p["eps"] if p["eps"] is not None else 2.0 * local_boundary_spacing(mesh, src, 0.0)
    radii = p["radii"] if p["radii"] is not None else [4 * eps * f for f in (1.0, 1.5, 2.0, 3.0)]
    pts = np.array([mesh.locate_on_surface(src + r * d, normal)[0] for r in radii])
    probe = probe_kernel(mesh, coeffs, q, src, pts, eps, opts, p["patch"])
    probe.radii = np.linalg.norm(pts - src, axis=1)
    probe.directions = np.tile(d, (len(pts), 1))
    probe.to_csv(out / "probe.csv")
    return {"source": src.tolist(), "normal": normal.tolist(), "points": pts.tolist(),
            "values": probe.values.tolist(), "radii": probe.radii.tolist(),
            "leading_order_reference": (1.0 / (2 * math.pi * probe.radii)).tolist()}


def _probe_options(cfg, coeffs, inner=False):
    r = cfg["reconstruct"]
    kw = {k: r[k] for k in ("refine_h", "refine_grading", "background_flux", "mode")}
    if r["radii"] is not None:
        kw["radii"] = tuple(r["radii"])
    if r["eps"] is not None:
        kw["eps"] = r["eps"]
    if r["mode"] == "exact":
        kw["exact_gamma"] = coeffs.gamma_inside if inner else coeffs.gamma_outside
    try:
        return ProbeOptions(**kw)
    except TypeError as exc:
        raise ValidationError(f"reconstruct: {exc}") from exc


def cmd_recover_boundary(cfg, out, rng):
    mesh, coeffs, opts = build_mesh(cfg), build_coefficients(cfg), build_solver_options(cfg)
    r = cfg["reconstruct"]
    seed = r["seed_point"]
    if seed is None:
        bv = mesh.vertices[mesh.boundary_vertices]
        lo, hi = bv.min(axis=0), bv.max(axis=0)
        seed = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), hi[2]]
    truth = coeffs.gamma_outside if r["truth"] else None
    rep = outer_boundary_reconstruction(mesh, coeffs, seed, _probe_options(cfg, coeffs), opts=opts,
                                        search_radius=r["search_radius"], truth=truth)
    write_stage_csv(rep, out / "stages.csv")
    return rep.to_json_dict()


def cmd_recover_inclusion(cfg, out, rng):
    mesh, coeffs, opts = build_mesh(cfg), build_coefficients(cfg), build_solver_options(cfg)
    if coeffs.gamma_inside is None:
        raise ValidationError("recover-inclusion needs coefficients.gamma1")
    r = cfg["reconstruct"]
    seed = r["seed_point"]
    if seed is None:
        inc = mesh.vertices[np.unique(mesh.tets[mesh.region == INSIDE_D])]
        lo, hi = inc.min(axis=0), inc.max(axis=0)
        seed = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), hi[2]]
    truth = coeffs.gamma_inside if r["truth"] else None
    rep = recover_inclusion_tensor(mesh, coeffs, seed, _probe_options(cfg, coeffs, inner=True),
                                   opts=opts, search_radius=r["search_radius"], truth=truth)
    write_stage_csv(rep, out / "stages.csv")
    return rep.to_json_dict()


def cmd_distinguish(cfg, out, rng):
    mesh, coeffs, opts = build_mesh(cfg), build_coefficients(cfg), build_solver_options(cfg)
    d = cfg["distinguish"]
    ref = coeffs.gamma_outside if d["reference"] is None else parse_tensor(d["reference"], "reference")
    base = coeffs.with_gamma_inside(ref)
    currents = face_currents(mesh)
    identical = distinguishability(mesh, base, base, currents, opts)
    rows, gaps = [], []
    for s in d["contrasts"]:
        other = coeffs.with_gamma_inside(parse_tensor(s, "contrast"))
        res = distinguishability(mesh, other, base, currents, opts)
        gaps.append(res["gap"])
        rows.append({"contrast": json.dumps(s), "gap": res["gap"], "gap_reverse": res["gap_reverse"]})
    _write_csv(out / "distinguish.csv", rows, ["contrast", "gap", "gap_reverse"])
    return {"identical_gap": identical["gap"], "gaps": gaps,
            "strictly_increasing": bool(all(a < b for a, b in zip(gaps, gaps[1:]))),
            "per_contrast": rows}


COMMANDS = {
    "forward": cmd_forward,
    "mms": cmd_mms,
    "ntd": cmd_ntd,
    "frechet": cmd_frechet,
    "probe": cmd_probe,
    "recover-boundary": cmd_recover_boundary,
    "recover-inclusion": cmd_recover_inclusion,
    "distinguish": cmd_distinguish,
}


# -- driver ---------------------------------------------------------------

def exit_code_for(exc):
    if isinstance(exc, (ValidationError, DomainError)):
        return EXIT_VALIDATION
    if isinstance(exc, (ConvergenceError, SingularProblemError)):
        return EXIT_SOLVER
    if isinstance(exc, (RecoveryFailedError, NonflatAssumptionError, SearchFailedError,
                        ExtractionFailedError)):
        return EXIT_RECONSTRUCTION
    stage = getattr(exc, "stage", "")
    return EXIT_SOLVER if stage in ("solver", "background") else EXIT_RECONSTRUCTION


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, SpdTensor3):
        return o.to_list()
    raise TypeError(f"not serialisable: {type(o)}")


def _clean(obj):
    """Round-trip through JSON so non-finite floats become strings."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _dump(path, payload):
    text = json.dumps(payload, indent=2, default=_json_default)
    payload = _clean(json.loads(text))
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, allow_nan=False)


def _limit_threads(n):
    if n is None:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=n)


def run(command, config_path, out_dir, seed=0, threads=None):
    """Run one subcommand; returns the exit status."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = None
    try:
        try:
            with open(config_path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config: {exc}") from exc
        cfg = resolve_config(raw)
        validate_config(cfg, command)
    except NtdError as exc:
        _dump(out / "report.json", {"status": "error", "command": command, "stage": "config",
                                    "error": type(exc).__name__, "message": str(exc), "config": cfg})
        return EXIT_VALIDATION
    digest = config_hash({"command": command, "seed": seed, "config": cfg})
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    limiter = _limit_threads(threads)
    try:
        result = COMMANDS[command](cfg, out, rng)
        status, code = "ok", EXIT_OK
        report = {"status": status, "command": command, "seed": seed, "config": cfg,
                  "config_hash": digest, "result": result}
    except NtdError as exc:
        tag_stage(exc, command)
        code = exit_code_for(exc)
        report = {"status": "error", "command": command, "seed": seed, "config": cfg,
                  "config_hash": digest, "stage": getattr(exc, "stage", "unknown"),
                  "error": type(exc).__name__, "message": str(exc)}
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    _dump(out / "report.json", report)
    _dump(out / "provenance.json", {
        "config_hash": digest, "command": command, "seed": seed, "threads": threads,
        "ntdrecon": __version__, "kernel_backend": kernels.BACKEND,
        "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
        "platform": platform.platform(), "wall_time_s": time.perf_counter() - t0,
    })
    return code


def build_parser():
    p = argparse.ArgumentParser(prog="ntdrecon", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ntdrecon {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=0, help="RNG seed (u64)")
        s.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.seed < 0 or args.seed >= 2**64:
        print("seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_VALIDATION
    if args.threads is not None and args.threads < 1:
        print("threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    code = run(args.command, args.config, args.out, args.seed, args.threads)
    with open(os.path.join(args.out, "report.json")) as fh:
        rep = json.load(fh)
    if code:
        print(f"{args.command}: {rep.get('error')} at stage {rep.get('stage')}: {rep.get('message')}",
              file=sys.stderr)
    else:
        print(f"{args.command}: ok -> {args.out}")
    return code


if __name__ == "__main__":
    sys.exit(main())

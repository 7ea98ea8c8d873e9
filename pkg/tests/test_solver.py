import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntdrecon.errors import ConvergenceError, DomainError, SingularProblemError, ValidationError
from ntdrecon.solver import (
    Coefficients,
    Manufactured,
    NeumannData,
    SolverOptions,
    assemble_mass,
    assemble_stiffness,
    check_energy_inequality,
    convergence_rates,
    energy,
    error_norms,
    patch_indicator,
    solution_to_csv,
    solution_to_json,
    solve_linear_schrodinger,
    solve_nonlinear,
)
from ntdrecon.tensors import SpdTensor3, rotation_about

GAMMA = SpdTensor3.diag(1.5, 1.0, 0.7).rotated(rotation_about((1, 0, 1), 25.0))
TIGHT = SolverOptions(newton_tol=1e-11, linear_tol=1e-13)


def linear_field(c):
    c = np.asarray(c, dtype=float)

    def u(x):
        return c[0] + x @ c[1:]

    def flux(x, n):
        return n @ (GAMMA.matrix @ c[1:])

    return u, (lambda x: np.broadcast_to(c[1:], x.shape)), flux


def test_affine_solution_is_reproduced_exactly(box4):
    # P1 holds an affine field exactly, and the quadrature sees the same u^3
    # on both sides, so the discrete solution equals it to round-off.
    u, grad, flux = linear_field([0.3, 1.0, -0.5, 0.25])
    coeffs = Coefficients(GAMMA, None, 1.0, lambda x: u(x) ** 3)
    sol = solve_nonlinear(box4, coeffs, NeumannData(function=flux), TIGHT)
    assert np.abs(sol.nodal_values - u(box4.vertices)).max() < 1e-9
    l2, h1 = error_norms(box4, sol.nodal_values, u, grad)
    assert l2 < 1e-9 and h1 < 1e-9


def test_affine_solution_linear_solver(box4):
    u, _, flux = linear_field([-0.2, 0.5, 0.5, 1.0])
    q = 2.0
    sol = solve_linear_schrodinger(box4, Coefficients(GAMMA), q, NeumannData(function=flux), TIGHT,
                                   source=lambda x: q * u(x))
    assert np.abs(sol.nodal_values - u(box4.vertices)).max() < 1e-10


def test_zero_data_gives_zero(box4):
    sol = solve_nonlinear(box4, Coefficients(GAMMA), NeumannData.zero(box4))
    assert sol.norms["linf"] == 0.0
    assert sol.stats["newton_iterations"] == 0


def test_constant_flux_first_step_is_exact_constant(box4):
    # a unit flux on the unit cube: the constant minimiser has c^3 * 1 = area = 6
    sol = solve_nonlinear(box4, Coefficients(SpdTensor3.identity()), NeumannData.constant(box4, 1.0), TIGHT)
    assert sol.stats["energy_history"][1] == pytest.approx(0.25 * 6 ** (4 / 3) - 6 ** (4 / 3), rel=1e-12)
    assert np.all(np.diff(sol.stats["energy_history"]) <= 1e-12)


def test_newton_independent_of_start(box_incl, rng):
    coeffs = Coefficients(GAMMA, SpdTensor3.identity().scaled(2.0), 1.0)
    g = NeumannData(rng.uniform(-1, 2, len(box_incl.boundary_vertices)))
    a = solve_nonlinear(box_incl, coeffs, g, TIGHT)
    b = solve_nonlinear(box_incl, coeffs, g, TIGHT, initial=5 * rng.standard_normal(box_incl.n_vertices))
    assert np.abs(a.nodal_values - b.nodal_values).max() < 1e-9


def test_cg_and_direct_agree(box_incl):
    coeffs = Coefficients(GAMMA, SpdTensor3.identity().scaled(2.0), 1.0)
    g = NeumannData.constant(box_incl, 1.0, patches=[1, 2])
    a = solve_nonlinear(box_incl, coeffs, g, SolverOptions(newton_tol=1e-11, linear_tol=1e-13))
    b = solve_nonlinear(box_incl, coeffs, g, SolverOptions(newton_tol=1e-11, linear_solver="direct"))
    assert np.abs(a.nodal_values - b.nodal_values).max() < 1e-9


def test_positive_data_positive_solution(box_incl):
    coeffs = Coefficients(GAMMA, SpdTensor3.identity().scaled(2.0), 1.0)
    lo = solve_nonlinear(box_incl, coeffs, NeumannData.constant(box_incl, 1.0, patches=[6]))
    hi = solve_nonlinear(box_incl, coeffs, NeumannData.constant(box_incl, 2.0, patches=[6]))
    assert lo.min_value > 0
    assert hi.min_value > lo.min_value


@given(st.floats(-3, 3), st.floats(0.2, 3.0))
@settings(max_examples=15, deadline=None)
def test_energy_inequality_holds(scale, alpha):
    from ntdrecon.mesh import build_box_mesh

    mesh = build_box_mesh((1.0, 1.0, 1.0), 3)
    x = mesh.vertices[mesh.boundary_vertices]
    g = NeumannData(scale * (1 + x[:, 0] - x[:, 2] ** 2))
    coeffs = Coefficients(SpdTensor3.identity(), None, alpha)
    sol = solve_nonlinear(mesh, coeffs, g, TIGHT)
    res = check_energy_inequality(mesh, coeffs, g, sol.nodal_values, 1.0, min(alpha, 1.0), TIGHT.newton_tol)
    assert res["holds"]


def test_energy_minimised_by_solution(box4, rng):
    coeffs = Coefficients(GAMMA)
    g = NeumannData(rng.standard_normal(len(box4.boundary_vertices)))
    u = solve_nonlinear(box4, coeffs, g, TIGHT).nodal_values
    e0 = energy(box4, coeffs, g, u)
    for _ in range(5):
        assert energy(box4, coeffs, g, u + 1e-3 * rng.standard_normal(len(u))) > e0


def test_stiffness_and_mass_oracles(box4):
    k = assemble_stiffness(box4, Coefficients(GAMMA))
    m = assemble_mass(box4)
    one = np.ones(box4.n_vertices)
    assert np.abs(k @ one).max() < 1e-12
    assert one @ (m @ one) == pytest.approx(1.0, rel=1e-13)
    x = box4.vertices[:, 0]
    # int |grad x|_gamma^2 = gamma_11 on the unit cube
    assert x @ (k @ x) == pytest.approx(GAMMA.matrix[0, 0], rel=1e-12)


def test_errors_raised(box4):
    with pytest.raises(DomainError):
        solve_nonlinear(box4, Coefficients(GAMMA, None, -1.0), NeumannData.zero(box4))
    with pytest.raises(SingularProblemError):
        solve_linear_schrodinger(box4, Coefficients(GAMMA), 0.0, NeumannData.zero(box4))
    with pytest.raises(DomainError):
        solve_linear_schrodinger(box4, Coefficients(GAMMA), -1.0, NeumannData.zero(box4))
    with pytest.raises(DomainError):
        NeumannData(np.array([1.0, np.nan]))
    with pytest.raises(DomainError):
        SolverOptions(linear_solver="gmres")
    with pytest.raises(ConvergenceError) as info:
        solve_nonlinear(box4, Coefficients(GAMMA), NeumannData.constant(box4, 5.0),
                        SolverOptions(newton_max_iter=1))
    assert info.value.history


def test_coefficient_validation():
    with pytest.raises(ValidationError):
        Coefficients(SpdTensor3.diag(3, 1, 1)).validate(0.5)
    with pytest.raises(ValidationError):
        Coefficients(SpdTensor3.identity(), None, 3.0).validate(0.5, 0.5)
    with pytest.raises(ValidationError):
        Coefficients(SpdTensor3.identity(), None, 0.0).validate(0.5)
    Coefficients(SpdTensor3.identity(), SpdTensor3.identity().scaled(2.0), 1.0).validate(0.5, 0.5)


def test_patch_indicator(box4):
    ind = patch_indicator(box4, [1])
    on = box4.vertices[box4.boundary_vertices][ind > 0]
    assert ind.sum() == 25
    assert np.ptp(on[:, np.argmin(np.ptp(on, axis=0))]) == 0.0


def test_convergence_rates_hand_values():
    assert np.allclose(convergence_rates([1.0, 0.5, 0.25], [4.0, 1.0, 0.25]), [2.0, 2.0])


def test_manufactured_source_consistency():
    man = Manufactured(offset=0.5)
    x = np.array([[0.1, 0.2, 0.3]])
    src = man.source(SpdTensor3.identity(), alpha=2.0)(x)
    k = np.array(man.k)
    expect = (k @ k) * np.sin(x @ k) + 2.0 * man.u(x) ** 3
    assert np.allclose(src, expect)


def test_exports(tmp_path, box4):
    sol = solve_nonlinear(box4, Coefficients(GAMMA), NeumannData.constant(box4, 1.0))
    solution_to_csv(box4, sol, tmp_path / "s.csv")
    solution_to_json(sol, tmp_path / "s.json")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "vertex,x,y,z,value" and len(lines) == box4.n_vertices + 1
    assert json.loads((tmp_path / "s.json").read_text())["norms"]["min"] == sol.min_value

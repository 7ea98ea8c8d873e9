import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntdrecon.errors import DomainError, ResolutionError
from ntdrecon.mesh import build_box_mesh, refine_near
from ntdrecon.ntd import (
    LinearNtdOperator,
    NtdMatrix,
    background_potential,
    frechet_check,
    half_space_kernel,
    local_boundary_spacing,
    mollified_delta,
    ntd_linear_matrix,
    ntd_nonlinear_apply,
    probe_kernel,
    surface_values,
)
from ntdrecon.solver import Coefficients, NeumannData, SolverOptions, discretization
from ntdrecon.tensors import SpdTensor3, metric_from_conductivity, random_spd, rotation_about

GAMMA = SpdTensor3.diag(2.0, 1.0, 1.0).rotated(rotation_about((0, 0, 1), 30.0))
TIGHT = SolverOptions(newton_tol=1e-10, linear_tol=1e-12)


@pytest.fixture(scope="module")
def ball_ntd(ball3):
    coeffs = Coefficients(GAMMA, None, 1.0)
    _, q = background_potential(ball3, coeffs, 1.0, TIGHT)
    return coeffs, q, ntd_linear_matrix(ball3, coeffs, q, TIGHT)


def test_matrix_symmetric_and_positive(ball_ntd, rng):
    _, _, mat = ball_ntd
    assert mat.weighted_symmetry_residual() < 1e-10
    for _ in range(5):
        assert mat.quadratic_form(rng.standard_normal(mat.dim)) > 0


def test_matrix_matches_operator(ball3, ball_ntd, rng):
    coeffs, q, mat = ball_ntd
    op = LinearNtdOperator(ball3, coeffs, q, TIGHT)
    g = rng.standard_normal(mat.dim)
    assert np.allclose(mat.apply(g), op.apply(g), rtol=1e-8, atol=1e-10)


def test_mass_balance_with_constant_q(box4, rng):
    # testing with v = 1: q * int v = int g
    coeffs = Coefficients(GAMMA)
    op = LinearNtdOperator(box4, coeffs, 3.0, SolverOptions(linear_solver="direct"))
    g = rng.uniform(0, 1, len(box4.boundary_vertices))
    v = op.solve_full(g)
    disc = discretization(box4)
    flux = disc.boundary_load(NeumannData(g)).sum()
    assert 3.0 * (disc.mass @ v).sum() == pytest.approx(flux, rel=1e-12)


def test_matrix_json_round_trip(tmp_path, ball3, ball_ntd):
    _, _, mat = ball_ntd
    mat.save_json(tmp_path / "n.json")
    mat.save_csv(tmp_path / "n.csv")
    back = NtdMatrix.load_json(tmp_path / "n.json", ball3)
    assert np.array_equal(back.matrix, mat.matrix)
    assert back.weighted_symmetry_residual() == pytest.approx(mat.weighted_symmetry_residual())
    assert len((tmp_path / "n.csv").read_text().splitlines()) == mat.dim + 1


def test_nonlinear_ntd_zero_and_odd(box4, rng):
    coeffs = Coefficients(GAMMA)
    assert not np.any(ntd_nonlinear_apply(box4, coeffs, NeumannData.zero(box4)))
    g = NeumannData(rng.standard_normal(len(box4.boundary_vertices)))
    # the cubic nonlinearity is odd, so the map is odd
    a = ntd_nonlinear_apply(box4, coeffs, g, TIGHT)
    b = ntd_nonlinear_apply(box4, coeffs, g.scaled(-1.0), TIGHT)
    assert np.allclose(a, -b, atol=1e-9)


def test_background_positive(box_incl):
    coeffs = Coefficients(GAMMA, SpdTensor3.identity().scaled(2.0), 1.0)
    u0, q = background_potential(box_incl, coeffs)
    assert u0.min_value > 0
    assert q.shape == (len(box_incl.tets), 4) and np.all(q > 0)


def test_frechet_first_order(box4):
    coeffs = Coefficients(GAMMA)
    x = box4.vertices[box4.boundary_vertices]
    res = frechet_check(box4, coeffs, NeumannData.constant(box4, 1.0), NeumannData(x[:, 0] - x[:, 1] ** 2),
                        opts=TIGHT)
    assert res["first_order"] and res["monotone"]
    assert res["fitted_order"] == pytest.approx(1.0, abs=0.1)


def test_frechet_input_checks(box4):
    coeffs = Coefficients(GAMMA)
    g = NeumannData.constant(box4, 1.0)
    with pytest.raises(DomainError):
        frechet_check(box4, coeffs, g, g, taus=(0.1, 0.2))
    with pytest.raises(DomainError):
        frechet_check(box4, coeffs, g.scaled(-1.0), g)


def test_mollified_delta_unit_mass(ball3):
    bv = ball3.boundary_vertices
    center = ball3.vertices[bv[np.argmax(ball3.vertices[bv, 2])]]
    g = mollified_delta(ball3, None, center, 0.6)
    mass = discretization(ball3).boundary_mass[bv][:, bv]
    assert np.ones(len(bv)) @ (mass @ g.values) == pytest.approx(1.0, rel=1e-12)
    assert np.all(g.values >= 0) and g.nonnegative
    with pytest.raises(ResolutionError):
        mollified_delta(ball3, None, center, 0.05)
    with pytest.raises(DomainError):
        mollified_delta(ball3, None, center, 0.0)


def test_local_boundary_spacing(box4):
    h = local_boundary_spacing(box4, np.array([0.5, 0.5, 1.0]), 0.3)
    assert 0.25 <= h <= 0.25 * math.sqrt(2)
    assert local_boundary_spacing(box4, np.array([5.0, 5.0, 5.0]), 0.1) == float("inf")


def test_surface_values_exact_for_affine(box4, rng):
    nodal = 1.0 + box4.vertices @ np.array([0.3, -1.0, 2.0])
    pts = np.column_stack([rng.uniform(0, 1, 10), rng.uniform(0, 1, 10), np.ones(10)])
    assert np.allclose(surface_values(box4, nodal, pts), 1.0 + pts @ np.array([0.3, -1.0, 2.0]), atol=1e-12)


@given(st.floats(0.1, 3.0), st.floats(0, 2 * math.pi))
@settings(max_examples=40, deadline=None)
def test_isotropic_kernel(r, phi):
    x = np.array([r * math.cos(phi), r * math.sin(phi), 0.0])
    assert half_space_kernel(SpdTensor3.identity(), x, np.zeros(3)) == pytest.approx(1 / (2 * math.pi * r))


def test_kernel_homogeneity_and_symmetry(rng):
    gamma = random_spd(rng, 0.5, 2.0)
    x = np.array([0.3, -0.2, 0.0])
    k = half_space_kernel(gamma, x, np.zeros(3))
    assert half_space_kernel(gamma, 2 * x, np.zeros(3)) == pytest.approx(k / 2, rel=1e-14)
    assert half_space_kernel(gamma, -x, np.zeros(3)) == pytest.approx(k, rel=1e-14)
    g = metric_from_conductivity(gamma).matrix
    assert k == pytest.approx(1 / (2 * math.pi * math.sqrt(x @ g @ x)), rel=1e-14)


def test_kernel_input_checks():
    with pytest.raises(DomainError):
        half_space_kernel(SpdTensor3.identity(), [1.0, 0.0, 0.0], [0.0, 0.0, 0.1])
    with pytest.raises(DomainError):
        half_space_kernel(SpdTensor3.identity(), [1.0, 0.0, -0.5], [0.0, 0.0, 0.0])
    with pytest.raises(DomainError):
        half_space_kernel(SpdTensor3.identity(), [0.0, 0.0, 0.0], [0.0, 0.0, 0.0])


def test_probe_kernel_decays():
    src = np.array([0.5, 0.5, 1.0])
    mesh = refine_near(build_box_mesh((1.0, 1.0, 1.0), 8), [src], 0.02, grading=0.3)
    coeffs = Coefficients(SpdTensor3.identity())
    xs = src + np.outer([0.16, 0.22, 0.3], [1.0, 0.0, 0.0])
    probe = probe_kernel(mesh, coeffs, 0.05, src, xs, 0.04, TIGHT)
    assert np.all(np.diff(probe.values) < 0)
    with pytest.raises(DomainError):
        probe_kernel(mesh, coeffs, 0.05, src, src[None, :] + [0.1, 0, 0], 0.04, TIGHT)

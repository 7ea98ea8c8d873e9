import json
import math

import numpy as np
import pytest

from ntdrecon.errors import ExtractionFailedError, NonflatAssumptionError
from ntdrecon.mesh import AxisBox, build_box_mesh, select_probe_frame, tag_inclusion
from ntdrecon.ntd import half_space_kernel
from ntdrecon.reconstruct import (
    CANONICAL_DIRECTIONS,
    ProbeOptions,
    ReconstructionReport,
    compare_to_truth,
    distinguishability,
    extract_tangential_metric,
    face_currents,
    fit_inverse_r,
    inner_ntd_matrix,
    outer_boundary_reconstruction,
    recover_boundary_tensor,
    recover_inclusion_tensor,
    stage_rows,
    write_stage_csv,
)
from ntdrecon.solver import Coefficients, SolverOptions
from ntdrecon.tensors import SpdTensor3, metric_from_conductivity, random_spd, rotation_about

RADII = np.geomspace(0.02, 0.2, 6)


def test_fit_recovers_exact_model():
    vals = 0.7 / RADII + 0.3 * np.log(1 / RADII) - 1.2
    c, coef, res = fit_inverse_r(RADII, vals)
    assert c == pytest.approx(0.7, rel=1e-12)
    assert np.allclose(coef, [0.7, 0.3, -1.2], rtol=1e-10)
    assert res < 1e-12
    c_plain, _, _ = fit_inverse_r(RADII, 0.7 / RADII, nuisance=False)
    assert c_plain == pytest.approx(0.7, rel=1e-14)


def test_fit_per_sample_radii():
    r = np.stack([RADII, 1.1 * RADII], axis=1)
    c, _, _ = fit_inverse_r(r, 0.4 / r + 0.1)
    assert c == pytest.approx(0.4, rel=1e-10)


def test_extraction_exact_metric(rng):
    gamma = random_spd(rng, 0.5, 2.0)
    dirs = np.column_stack([CANONICAL_DIRECTIONS, np.zeros(3)])
    vals = half_space_kernel(gamma, dirs[:, None, :] * RADII[None, :, None], np.zeros(3))
    tm, fits = extract_tangential_metric(vals, radii=RADII)
    assert np.allclose(tm.g_tilde, metric_from_conductivity(gamma).matrix[:2, :2], rtol=1e-10)
    assert len(fits) == 3 and all(f["residual"] < 1e-10 for f in fits)


def test_extraction_errors():
    good = np.ones((3, 6)) / RADII
    with pytest.raises(ExtractionFailedError):
        extract_tangential_metric(good[:2], CANONICAL_DIRECTIONS[:2], RADII)
    with pytest.raises(ExtractionFailedError):
        extract_tangential_metric(good[:, :3], radii=RADII[:3])
    with pytest.raises(ExtractionFailedError):
        extract_tangential_metric(-good, radii=RADII)
    # inconsistent direction strengths give an indefinite metric
    bad = good * np.array([[1.0], [1.0], [0.3]])
    with pytest.raises(ExtractionFailedError) as info:
        extract_tangential_metric(bad, radii=RADII)
    assert info.value.stage == "extract"


def test_probe_options():
    opts = ProbeOptions.dyadic(0.16, levels=4)
    assert opts.radii == (0.16, 0.08, 0.04, 0.02)
    assert opts.epsilon == pytest.approx(0.005)
    assert ProbeOptions(eps=0.1).epsilon == 0.1


@pytest.mark.parametrize("angle", [0.0, 30.0, 75.0])
def test_exact_mode_recovers_gamma(ball3, angle):
    gamma = SpdTensor3.diag(2.0, 1.0, 0.6).rotated(rotation_about((1, 1, 0), angle))
    frame = select_probe_frame(ball3, 1, (0.0, 0.0, 1.0), search_radius=0.8)
    est = recover_boundary_tensor(ball3, None, frame, ProbeOptions(mode="exact", exact_gamma=gamma))
    assert compare_to_truth(est, gamma)["relative_frobenius"] < 1e-8


def test_exact_mode_report_and_exports(tmp_path, ball3):
    gamma = SpdTensor3.diag(2.0, 1.0, 1.0)
    rep = outer_boundary_reconstruction(ball3, Coefficients(gamma), (0.0, 0.0, 1.0),
                                        ProbeOptions(mode="exact", exact_gamma=gamma), truth=gamma)
    assert rep.errors["gamma0"]["relative_frobenius"] < 1e-8
    assert rep.errors["gamma0"]["principal_axis_deg"] < 1e-3
    rep.save_json(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert np.allclose(d["recovered_gamma0"], gamma.to_list())
    assert len(stage_rows(rep)) == 9
    write_stage_csv(rep, tmp_path / "s.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 10


def test_report_without_inclusion():
    d = ReconstructionReport(SpdTensor3.identity()).to_json_dict()
    assert d["recovered_gamma1"] is None


def test_box_inclusion_rejected():
    mesh = tag_inclusion(build_box_mesh((1, 1, 1), 8), AxisBox((0.25,) * 3, (0.75,) * 3))
    coeffs = Coefficients(SpdTensor3.identity(), SpdTensor3.identity().scaled(2.0))
    with pytest.raises(NonflatAssumptionError) as info:
        recover_inclusion_tensor(mesh, coeffs, (0.5, 0.5, 0.75), ProbeOptions(mode="exact"), search_radius=0.2)
    assert info.value.stage == "frame"


def test_inclusion_exact_mode(ball4_incl):
    gamma1 = SpdTensor3.diag(2.0, 1.5, 1.0)
    coeffs = Coefficients(SpdTensor3.identity(), gamma1)
    rep = recover_inclusion_tensor(ball4_incl, coeffs, (0.0, 0.0, 0.5),
                                   ProbeOptions(mode="exact", exact_gamma=gamma1), search_radius=0.4,
                                   truth=gamma1)
    assert rep.errors["gamma1"]["relative_frobenius"] < 1e-8


def test_inner_ntd_matrix_symmetric(ball4_incl):
    coeffs = Coefficients(SpdTensor3.identity(), SpdTensor3.identity().scaled(2.0))
    mat = inner_ntd_matrix(ball4_incl, coeffs, 1.0, SolverOptions(newton_tol=1e-10))
    assert mat.weighted_symmetry_residual() < 1e-10
    assert mat.dim == int((np.abs(np.linalg.norm(ball4_incl.vertices, axis=1) - 0.5) < 1e-12).sum())


def test_distinguishability(box_incl):
    base = Coefficients(SpdTensor3.identity(), SpdTensor3.identity())
    currents = face_currents(box_incl)
    assert len(currents) == 6
    same = distinguishability(box_incl, base, base, currents)
    assert same["gap"] == 0.0
    other = distinguishability(box_incl, base, base.with_gamma_inside(SpdTensor3.identity().scaled(2.0)), currents)
    assert other["gap"] > 0 and other["gap_reverse"] > 0
    assert all(r["exterior_background_gap"] > 0 for r in other["per_current"])


def test_compare_to_truth_hand_value():
    a = SpdTensor3.identity()
    b = SpdTensor3.identity().scaled(1.1)
    assert compare_to_truth(b, a)["relative_frobenius"] == pytest.approx(0.1)
    assert math.isfinite(compare_to_truth(b, a)["principal_axis_deg"])

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntdrecon.errors import DegenerateFrameError, DomainError, RecoveryFailedError
from ntdrecon.tensors import (
    ProbeFrame,
    SpdTensor3,
    TangentialMetric,
    conductivity_from_metric,
    ellipticity_check,
    forward_restrictions,
    metric_from_conductivity,
    principal_axis_angle,
    probe_bases,
    random_spd,
    recover_full_metric,
    relative_frobenius_error,
    rotation_about,
    symmetric_eigvals3,
    tangential_restriction,
)

eig = st.floats(0.2, 5.0)
angle = st.floats(-180.0, 180.0)
slope = st.floats(0.1, 3.0).flatmap(lambda a: st.sampled_from([a, -a]))


@st.composite
def spd(draw):
    ev = [draw(eig) for _ in range(3)]
    axis = draw(st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.1, 1)))
    return SpdTensor3.diag(*ev).rotated(rotation_about(axis, draw(angle)))


def test_identity_metric_is_identity():
    assert np.allclose(metric_from_conductivity(SpdTensor3.identity()).matrix, np.eye(3))


def test_diag_metric_hand_value():
    # det = 2, inverse = diag(1/2, 1, 1)
    g = metric_from_conductivity(SpdTensor3.diag(2, 1, 1))
    assert np.allclose(g.matrix, np.diag([1.0, 2.0, 2.0]), atol=1e-14)


def test_rejects_indefinite():
    with pytest.raises(DomainError):
        SpdTensor3.diag(1, -1, 1)
    with pytest.raises(DomainError):
        SpdTensor3.from_matrix([[1, 2, 0], [0, 1, 0], [0, 0, 1]])


@given(spd())
@settings(max_examples=60, deadline=None)
def test_metric_round_trip(gamma):
    back = conductivity_from_metric(metric_from_conductivity(gamma))
    assert relative_frobenius_error(back, gamma) < 1e-12


@given(spd())
@settings(max_examples=60, deadline=None)
def test_closed_form_eigenvalues(gamma):
    ref = np.linalg.eigvalsh(gamma.matrix)
    assert np.allclose(symmetric_eigvals3(gamma.matrix), ref, rtol=1e-10, atol=1e-12)


@given(spd(), slope, st.floats(-1.0, 1.0), slope)
@settings(max_examples=80, deadline=None)
def test_recovery_round_trip(metric, alpha, beta, delta):
    frame = ProbeFrame.synthetic(alpha, beta, delta)
    g1, g2, g3 = forward_restrictions(metric, frame)
    rec, diag = recover_full_metric(g1, g2, g3, frame, return_diagnostics=True)
    assert relative_frobenius_error(rec, metric) < 1e-10
    assert diag["relative_max"] < 1e-10


def test_probe_bases_are_orthonormal():
    for b1, b2 in probe_bases(0.7, 0.3, -1.2):
        assert abs(b1 @ b2) < 1e-14
        assert math.isclose(np.linalg.norm(b1), 1.0) and math.isclose(np.linalg.norm(b2), 1.0)


def test_degenerate_frame_rejected():
    with pytest.raises(DegenerateFrameError):
        ProbeFrame.synthetic(0.01, 0.0, 0.5)
    with pytest.raises(DegenerateFrameError):
        ProbeFrame.synthetic(0.5, 0.0, 0.0)


def test_inconsistent_restrictions_fail_recovery():
    frame = ProbeFrame.synthetic(0.2, 0.0, 0.2)
    g1 = np.eye(2)
    g2 = np.array([[1.0, 0.0], [0.0, 1.0]])
    g3 = np.array([[0.2, 0.0], [0.0, 1.0]])
    with pytest.raises(RecoveryFailedError):
        recover_full_metric(g1, g2, g3, frame)


def test_ellipticity_bounds():
    assert ellipticity_check(SpdTensor3.diag(0.5, 1, 2), 0.5)
    assert not ellipticity_check(SpdTensor3.diag(0.4, 1, 1), 0.5)
    assert not ellipticity_check(SpdTensor3.diag(1, 1, 2.5), 0.5)
    with pytest.raises(DomainError):
        ellipticity_check(SpdTensor3.identity(), 1.5)
    with pytest.raises(DomainError):
        ellipticity_check(SpdTensor3.identity(), 0.0)


def test_tangential_restriction_needs_orthonormal_basis():
    with pytest.raises(DomainError):
        tangential_restriction(SpdTensor3.identity(), [1, 0, 0], [1, 1, 0])
    with pytest.raises(DomainError):
        TangentialMetric(np.zeros(3), ([1, 0, 0], [0, 1, 0]), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_principal_axis_angle():
    a = SpdTensor3.diag(2, 1, 1)
    b = a.rotated(rotation_about((0, 0, 1), 30))
    assert principal_axis_angle(a, b) == pytest.approx(30.0, abs=1e-9)
    assert principal_axis_angle(a, a) == pytest.approx(0.0, abs=1e-6)


def test_random_spd_eigen_range(rng):
    for _ in range(20):
        ev = random_spd(rng, 0.5, 2.0).eigvals()
        assert ev[0] >= 0.5 - 1e-12 and ev[-1] <= 2.0 + 1e-12


def test_rotation_is_orthogonal():
    r = rotation_about((1, 2, 3), 47)
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-14)
    assert np.linalg.det(r) == pytest.approx(1.0)

"""Symmetric 3x3 tensor algebra: conductivity/metric transforms and six-entry
metric recovery from three tangential restrictions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFrameError, DomainError, RecoveryFailedError

ALPHA_MIN = 0.05
DELTA_MIN = 0.05
_ORTHO_TOL = 1e-12

# flat storage order (a11, a12, a13, a22, a23, a33)
_IDX = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


def symmetric_eigvals3(a):
    """Eigenvalues of a symmetric 3x3 matrix, ascending.

    Cyclic Jacobi rotations; accurate to round-off even for repeated
    eigenvalues, where the trigonometric closed form loses half the digits.
    """
    a = np.array(a, dtype=float)
    scale = np.abs(a).max()
    if scale == 0.0:
        return np.zeros(3)
    for _ in range(50):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        if off <= (1e-17 * scale) ** 2:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            if abs(a[p, q]) <= 1e-18 * scale:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
            t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
            c = 1.0 / math.hypot(t, 1.0)
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = c * t
            rot[q, p] = -c * t
            a = rot.T @ a @ rot
    return np.sort(np.diag(a).copy())


@dataclass(frozen=True)
class SpdTensor3:
    """Symmetric positive-definite 3x3 tensor stored as six entries."""

    entries: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.entries)
        if len(vals) != 6 or not all(math.isfinite(v) for v in vals):
            raise DomainError("SpdTensor3 needs six finite entries")
        object.__setattr__(self, "entries", vals)
        if symmetric_eigvals3(self.matrix)[0] <= 0.0:
            raise DomainError(f"tensor is not positive definite: {vals}")

    @classmethod
    def from_matrix(cls, m, sym_tol=1e-9):
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3):
            raise DomainError("expected a 3x3 matrix")
        scale = max(1.0, float(np.max(np.abs(m))))
        if np.max(np.abs(m - m.T)) > sym_tol * scale:
            raise DomainError("matrix is not symmetric")
        m = 0.5 * (m + m.T)
        return cls(tuple(m[i, j] for i, j in _IDX))

    @classmethod
    def identity(cls):
        return cls((1.0, 0.0, 0.0, 1.0, 0.0, 1.0))

    @classmethod
    def diag(cls, d1, d2, d3):
        return cls((d1, 0.0, 0.0, d2, 0.0, d3))

    @property
    def matrix(self):
        a11, a12, a13, a22, a23, a33 = self.entries
        return np.array([[a11, a12, a13], [a12, a22, a23], [a13, a23, a33]])

    def eigvals(self):
        return symmetric_eigvals3(self.matrix)

    def det(self):
        return float(np.linalg.det(self.matrix))

    def scaled(self, s):
        return SpdTensor3(tuple(s * v for v in self.entries))

    def rotated(self, rot):
        rot = np.asarray(rot, dtype=float)
        return SpdTensor3.from_matrix(rot @ self.matrix @ rot.T)

    def to_list(self):
        return list(self.entries)


def _as_tensor(t):
    return t if isinstance(t, SpdTensor3) else SpdTensor3.from_matrix(t)


def metric_from_conductivity(gamma):
    """Return (det g) g^-1 for a conductivity tensor g."""
    m = _as_tensor(gamma).matrix
    return SpdTensor3.from_matrix(np.linalg.det(m) * np.linalg.inv(m))


def conductivity_from_metric(metric):
    """Return (det G)^(1/2) G^-1, the inverse of :func:`metric_from_conductivity`."""
    m = _as_tensor(metric).matrix
    return SpdTensor3.from_matrix(math.sqrt(np.linalg.det(m)) * np.linalg.inv(m))


def ellipticity_check(gamma, lambda0):
    """True iff every eigenvalue of ``gamma`` lies in [lambda0, 1/lambda0]."""
    if not (0.0 < lambda0 <= 1.0):
        raise DomainError(f"lambda0 must lie in (0, 1], got {lambda0}")
    ev = _as_tensor(gamma).eigvals()
    # relative slack so eigenvalues sitting exactly on a bound are accepted
    tol = 1e-12 * max(1.0, 1.0 / lambda0)
    return bool(ev[0] >= lambda0 - tol and ev[-1] <= 1.0 / lambda0 + tol)


def _check_orthonormal(v1, v2):
    if (
        abs(v1 @ v2) > _ORTHO_TOL
        or abs(np.linalg.norm(v1) - 1.0) > _ORTHO_TOL
        or abs(np.linalg.norm(v2) - 1.0) > _ORTHO_TOL
    ):
        raise DomainError("tangent basis is not orthonormal")


@dataclass(frozen=True)
class TangentialMetric:
    base_point: np.ndarray
    basis: tuple
    g_tilde: np.ndarray

    def __post_init__(self):
        v1, v2 = (np.asarray(v, dtype=float) for v in self.basis)
        _check_orthonormal(v1, v2)
        g = np.asarray(self.g_tilde, dtype=float)
        if g.shape != (2, 2) or abs(g[0, 1] - g[1, 0]) > 1e-12 * max(1.0, abs(g).max()):
            raise DomainError("g_tilde must be a symmetric 2x2 matrix")
        if g[0, 0] <= 0 or np.linalg.det(g) <= 0:
            raise DomainError("g_tilde is not positive definite")


def tangential_restriction(metric, v1, v2):
    """2x2 matrix of the quadratic form of ``metric`` on the basis (v1, v2)."""
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    _check_orthonormal(v1, v2)
    m = _as_tensor(metric).matrix
    g11 = v1 @ m @ v1
    g22 = v2 @ m @ v2
    g12 = v1 @ m @ v2
    return np.array([[g11, g12], [g12, g22]])


@dataclass(frozen=True)
class ProbeFrame:
    """Three boundary probe points with slope parameters in the local frame of P1.

    ``rotation`` maps global coordinates to the local frame (rows are the
    local e1, e2, e3 with e3 the inward normal at P1).
    """

    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    alpha: float
    beta: float
    delta: float
    normals: tuple = ()
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    facets: tuple = ()
    delta_at_p2: float = 0.0
    alpha_min: float = ALPHA_MIN
    delta_min: float = DELTA_MIN

    def __post_init__(self):
        check_frame(self.alpha, self.delta, self.alpha_min, self.delta_min)

    @classmethod
    def synthetic(cls, alpha, beta, delta, rotation=None, **kw):
        """Mesh-free frame with all points at the origin.

        ``rotation`` maps global to local coordinates (identity by default);
        the stored normals are global.
        """
        rot = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        n1 = np.array([0.0, 0.0, -1.0])
        n2 = np.array([0.0, alpha, -1.0]) / math.hypot(1.0, alpha)
        n3 = np.array([delta, beta, -1.0]) / math.sqrt(1 + beta**2 + delta**2)
        z = np.zeros(3)
        normals = tuple(rot.T @ n for n in (n1, n2, n3))
        return cls(z, z, z, alpha, beta, delta, normals=normals, rotation=rot, **kw)

    def quality(self):
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "delta": self.delta,
            "delta_at_p2": self.delta_at_p2,
            "delta_at_p2_ratio": abs(self.delta_at_p2) / abs(self.alpha),
        }


def check_frame(alpha, delta, alpha_min=ALPHA_MIN, delta_min=DELTA_MIN):
    if not (math.isfinite(alpha) and math.isfinite(delta)):
        raise DegenerateFrameError("non-finite frame slopes")
    if abs(alpha) < alpha_min or abs(delta) < delta_min:
        raise DegenerateFrameError(
            f"frame slopes too small: |alpha|={abs(alpha):.3g}, |delta|={abs(delta):.3g}"
        )


def probe_bases(alpha, beta, delta):
    """Tangent bases at P1, P2, P3 in local coordinates.

    P3's second vector is Gram-Schmidt orthogonalised against the first so
    the basis is orthonormal; only its first vector enters the recovery.
    """
    e1, e2, e3 = np.eye(3)
    b1 = (e1, e2)
    b2 = (e1, (e2 + alpha * e3) / math.hypot(1.0, alpha))
    w1 = (e1 + delta * e3) / math.hypot(1.0, delta)
    w2 = e2 + beta * e3
    w2 = w2 - (w2 @ w1) * w1
    b3 = (w1, w2 / np.linalg.norm(w2))
    return b1, b2, b3


def forward_restrictions(metric, frame):
    """Tangential restrictions of ``metric`` at the three frame points."""
    return tuple(
        tangential_restriction(metric, *b)
        for b in probe_bases(frame.alpha, frame.beta, frame.delta)
    )


def recover_full_metric(g1, g2, g3, frame, return_diagnostics=False):
    """Recover all six metric entries from restrictions at P1, P2, P3.

    Entries 11, 12, 22 come from ``g1``; 13 from the off-diagonal of ``g2``;
    33 from ``g3[0, 0]``; 23 from ``g2[1, 1]``.  The remaining entries of
    ``g2``/``g3`` are redundant and only feed the consistency residual.
    """
    alpha, beta, delta = frame.alpha, frame.beta, frame.delta
    check_frame(alpha, delta, frame.alpha_min, frame.delta_min)
    g1, g2, g3 = (np.asarray(g, dtype=float) for g in (g1, g2, g3))
    m11, m12, m22 = g1[0, 0], g1[0, 1], g1[1, 1]
    m13 = (math.sqrt(1 + alpha**2) * g2[0, 1] - m12) / alpha
    m33 = ((1 + delta**2) * g3[0, 0] - m11 - 2 * delta * m13) / delta**2
    m23 = ((1 + alpha**2) * g2[1, 1] - m22 - alpha**2 * m33) / (2 * alpha)
    m = np.array([[m11, m12, m13], [m12, m22, m23], [m13, m23, m33]])
    if not np.all(np.isfinite(m)) or np.linalg.eigvalsh(m)[0] <= 0.0:
        raise RecoveryFailedError("recovered metric is not positive definite", stage="algebra")
    metric = SpdTensor3.from_matrix(m)
    if not return_diagnostics:
        return metric
    b1, b2, b3 = probe_bases(alpha, beta, delta)
    pred2 = tangential_restriction(metric, *b2)
    pred3 = tangential_restriction(metric, *b3)
    resid = {
        "g2_11": float(pred2[0, 0] - g2[0, 0]),
        "g3_22": float(pred3[1, 1] - g3[1, 1]),
        "g3_12": float(pred3[0, 1] - g3[0, 1]),
    }
    scale = float(np.abs(m).max())
    resid["relative_max"] = max(abs(v) for v in resid.values()) / scale
    return metric, resid


def relative_frobenius_error(estimate, truth):
    a = _as_tensor(estimate).matrix
    b = _as_tensor(truth).matrix
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def principal_axis_angle(estimate, truth):
    """Angle in degrees between the leading eigenvectors of two tensors."""
    va = np.linalg.eigh(_as_tensor(estimate).matrix)[1][:, -1]
    vb = np.linalg.eigh(_as_tensor(truth).matrix)[1][:, -1]
    c = min(1.0, abs(float(va @ vb)))
    return math.degrees(math.acos(c))


def random_spd(rng, low=0.5, high=2.0):
    """Random SPD tensor with eigenvalues uniform in [low, high]."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    ev = rng.uniform(low, high, size=3)
    return SpdTensor3.from_matrix(q @ np.diag(ev) @ q.T)


def rotation_about(axis, degrees):
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    t = math.radians(degrees)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(t) * kx + (1 - math.cos(t)) * kx @ kx

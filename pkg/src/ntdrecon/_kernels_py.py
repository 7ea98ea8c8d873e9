"""Pure-numpy element kernels; reference implementation and import fallback."""

import numpy as np

QA = 0.5854101966249685
QB = 0.1381966011250105
# PHI[q, i]: value of the i-th P1 basis function at quadrature point q
PHI = np.full((4, 4), QB) + np.eye(4) * (QA - QB)


def p1_gradients(vertices, tets):
    """Barycentric gradients (M, 4, 3) and volumes (M,) of each tet."""
    p = vertices[tets]
    jac = np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1))
    det = np.linalg.det(jac)
    inv = np.linalg.inv(jac)  # rows are gradients of lambda_1..3
    grads = np.empty((len(tets), 4, 3))
    grads[:, 1:] = inv
    grads[:, 0] = -inv.sum(axis=1)
    return grads, det / 6.0


def stiffness_local(grads, vol, gam):
    """vol * grad_i . gam grad_j for every tet; ``gam`` is (M, 3, 3)."""
    return np.einsum("m,mia,mab,mjb->mij", vol, grads, gam, grads, optimize=True)


def quad_mass_local(qvals, vol):
    """sum_q (vol/4) qvals[q] phi_i(q) phi_j(q); qvals is (M, 4)."""
    w = qvals * (vol / 4.0)[:, None]
    return np.einsum("mq,qi,qj->mij", w, PHI, PHI, optimize=True)


def cubic_terms(u_tet, alpha, vol):
    """Quadrature of the cubic reaction for nodal values u_tet (M, 4).

    Returns the residual contribution int alpha u^3 phi_i (M, 4), the
    Jacobian weights 3 alpha u^2 at the quadrature points (M, 4), and the
    element quartic energy int alpha u^4 / 4 (M,).
    """
    uq = u_tet @ PHI.T
    w = (vol / 4.0)[:, None]
    a = alpha[:, None]
    res = (w * a * uq**3) @ PHI
    qvals = 3.0 * a * uq**2
    quartic = (w * a * uq**4).sum(axis=1) / 4.0
    return res, qvals, quartic

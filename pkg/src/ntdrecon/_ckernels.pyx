# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled element kernels; same signatures and results as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef double QA = 0.5854101966249685
cdef double QB = 0.1381966011250105


cdef inline double _phi(int q, int i) nogil:
    return QA if q == i else QB


def p1_gradients(double[:, ::1] vertices, long[:, ::1] tets):
    cdef Py_ssize_t m = tets.shape[0]
    grads_arr = np.empty((m, 4, 3))
    vol_arr = np.empty(m)
    cdef double[:, :, ::1] grads = grads_arr
    cdef double[::1] vol = vol_arr
    cdef Py_ssize_t e, a
    cdef double j[3][3]
    cdef double det, inv
    cdef long v0
    with nogil:
        for e in range(m):
            v0 = tets[e, 0]
            for a in range(3):
                j[a][0] = vertices[tets[e, 1], a] - vertices[v0, a]
                j[a][1] = vertices[tets[e, 2], a] - vertices[v0, a]
                j[a][2] = vertices[tets[e, 3], a] - vertices[v0, a]
            det = (j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                   - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                   + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]))
            inv = 1.0 / det
            # rows of J^-1 (cofactor transpose / det)
            grads[e, 1, 0] = (j[1][1] * j[2][2] - j[1][2] * j[2][1]) * inv
            grads[e, 1, 1] = (j[0][2] * j[2][1] - j[0][1] * j[2][2]) * inv
            grads[e, 1, 2] = (j[0][1] * j[1][2] - j[0][2] * j[1][1]) * inv
            grads[e, 2, 0] = (j[1][2] * j[2][0] - j[1][0] * j[2][2]) * inv
            grads[e, 2, 1] = (j[0][0] * j[2][2] - j[0][2] * j[2][0]) * inv
            grads[e, 2, 2] = (j[0][2] * j[1][0] - j[0][0] * j[1][2]) * inv
            grads[e, 3, 0] = (j[1][0] * j[2][1] - j[1][1] * j[2][0]) * inv
            grads[e, 3, 1] = (j[0][1] * j[2][0] - j[0][0] * j[2][1]) * inv
            grads[e, 3, 2] = (j[0][0] * j[1][1] - j[0][1] * j[1][0]) * inv
            for a in range(3):
                grads[e, 0, a] = -(grads[e, 1, a] + grads[e, 2, a] + grads[e, 3, a])
            vol[e] = det / 6.0
    return grads_arr, vol_arr


def stiffness_local(double[:, :, ::1] grads, double[::1] vol, double[:, :, ::1] gam):
    cdef Py_ssize_t m = grads.shape[0]
    out_arr = np.empty((m, 4, 4))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t e, i, k, a, b
    cdef double tg[4][3]
    cdef double s
    with nogil:
        for e in range(m):
            for i in range(4):
                for a in range(3):
                    s = 0.0
                    for b in range(3):
                        s = s + gam[e, a, b] * grads[e, i, b]
                    tg[i][a] = s
            for i in range(4):
                for k in range(i, 4):
                    s = 0.0
                    for a in range(3):
                        s = s + grads[e, i, a] * tg[k][a]
                    out[e, i, k] = vol[e] * s
                    out[e, k, i] = vol[e] * s
    return out_arr


def quad_mass_local(double[:, ::1] qvals, double[::1] vol):
    cdef Py_ssize_t m = qvals.shape[0]
    out_arr = np.empty((m, 4, 4))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t e, q, i, k
    cdef double w[4]
    cdef double pp[4][4][4]
    cdef double s
    for q in range(4):
        for i in range(4):
            for k in range(4):
                pp[q][i][k] = _phi(q, i) * _phi(q, k)
    with nogil:
        for e in range(m):
            for q in range(4):
                w[q] = 0.25 * vol[e] * qvals[e, q]
            for i in range(4):
                for k in range(i, 4):
                    s = w[0] * pp[0][i][k] + w[1] * pp[1][i][k] + w[2] * pp[2][i][k] + w[3] * pp[3][i][k]
                    out[e, i, k] = s
                    out[e, k, i] = s
    return out_arr


def cubic_terms(double[:, ::1] u_tet, double[::1] alpha, double[::1] vol):
    cdef Py_ssize_t m = u_tet.shape[0]
    res_arr = np.zeros((m, 4))
    qv_arr = np.empty((m, 4))
    en_arr = np.empty(m)
    cdef double[:, ::1] res = res_arr
    cdef double[:, ::1] qv = qv_arr
    cdef double[::1] en = en_arr
    cdef Py_ssize_t e, q, i
    cdef double uq, w, quart
    with nogil:
        for e in range(m):
            w = 0.25 * vol[e] * alpha[e]
            quart = 0.0
            for q in range(4):
                uq = 0.0
                for i in range(4):
                    uq = uq + _phi(q, i) * u_tet[e, i]
                for i in range(4):
                    res[e, i] += w * uq * uq * uq * _phi(q, i)
                qv[e, q] = 3.0 * alpha[e] * uq * uq
                quart = quart + w * uq * uq * uq * uq
            en[e] = quart / 4.0
    return res_arr, qv_arr, en_arr

# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled batch kernels: forward pass and analytic squared-loss gradient.

Same contract and encodings as the numpy fallback in ``_kernels_py``; see
that module for the field-by-field documentation. Within this backend the
gradient recomputes predictions through the identical per-sample code path
as ``predict_batch``, so residuals on self-generated data are bitwise zero.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, sqrt, tanh

cnp.import_array()

cdef double DEGENERATE_NORM = 1e-12
cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


cdef inline double _ipow(double u, int p) noexcept nogil:
    cdef double r = 1.0
    cdef int i
    for i in range(p):
        r *= u
    return r


cdef inline double _phi(int family, int degree, double u) noexcept nogil:
    if family == 0:
        return u
    elif family == 1:
        return _ipow(u, degree)
    elif family == 2:
        return u if u > 0.0 else 0.0
    elif family == 3:
        return u * 0.5 * (1.0 + erf(u * INV_SQRT2))
    elif family == 4:
        return tanh(u)
    else:
        return 1.0 / (1.0 + exp(-u))


cdef inline double _dphi(int family, int degree, double u) noexcept nogil:
    cdef double t
    if family == 0:
        return 1.0
    elif family == 1:
        return degree * _ipow(u, degree - 1)
    elif family == 2:
        return 1.0 if u > 0.0 else 0.0
    elif family == 3:
        return 0.5 * (1.0 + erf(u * INV_SQRT2)) + u * INV_SQRT2PI * exp(-0.5 * u * u)
    elif family == 4:
        t = tanh(u)
        return 1.0 - t * t
    else:
        t = 1.0 / (1.0 + exp(-u))
        return t * (1.0 - t)


cdef double _forward_one(
    const double[:, ::1] X, Py_ssize_t m,
    const double[::1] beta0, const double[:, ::1] B1,
    const double[:, ::1] A, const double[::1] b, const double[::1] nb,
    int router, double tau1, double tau2, int family, int degree,
    double* S, double* W, double* U, double* H, double* nx_out,
) noexcept nogil:
    """Scores, softmax weights, expert values and prediction for sample m."""
    cdef Py_ssize_t k = beta0.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t i, u
    cdef double nx = 0.0, dot, zmax, wsum, f

    for u in range(d):
        nx += X[m, u] * X[m, u]
    nx = sqrt(nx)
    nx_out[0] = nx

    for i in range(k):
        dot = 0.0
        for u in range(d):
            dot += B1[i, u] * X[m, u]
        if router == 0:
            S[i] = dot
        elif router == 1:
            if nb[i] < DEGENERATE_NORM or nx < DEGENERATE_NORM:
                S[i] = 0.0
            else:
                S[i] = dot / (nb[i] * nx)
        else:
            S[i] = dot / ((nb[i] + tau1) * (nx + tau2))

    zmax = S[0] + beta0[0]
    for i in range(1, k):
        if S[i] + beta0[i] > zmax:
            zmax = S[i] + beta0[i]
    wsum = 0.0
    for i in range(k):
        W[i] = exp(S[i] + beta0[i] - zmax)
        wsum += W[i]
    for i in range(k):
        W[i] /= wsum

    f = 0.0
    for i in range(k):
        if family == 6:
            U[i] = 0.0
            H[i] = b[i]
        else:
            dot = 0.0
            for u in range(d):
                dot += A[i, u] * X[m, u]
            U[i] = dot + b[i]
            H[i] = _phi(family, degree, U[i])
        f += W[i] * H[i]
    return f


cdef void _atom_norms(const double[:, ::1] B1, double[::1] nb) noexcept nogil:
    cdef Py_ssize_t i, u
    cdef double s
    for i in range(B1.shape[0]):
        s = 0.0
        for u in range(B1.shape[1]):
            s += B1[i, u] * B1[i, u]
        nb[i] = sqrt(s)


def predict_batch(X, beta0_in, B1, A, b, int router, double tau1,
                  double tau2, int family, int degree, nx=None):
    """Model predictions for every row of X; returns (n,) array."""
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[::1] beta0 = np.ascontiguousarray(beta0_in, dtype=np.float64)
    cdef const double[:, ::1] B1v = np.ascontiguousarray(B1, dtype=np.float64)
    cdef const double[:, ::1] Av = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0]
    cdef Py_ssize_t k = beta0.shape[0]
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    nb_arr = np.empty(k)
    cdef double[::1] nb = nb_arr
    buf_arr = np.empty(4 * k)
    cdef double[::1] buf = buf_arr
    cdef double nx_val
    cdef Py_ssize_t m
    with nogil:
        _atom_norms(B1v, nb)
        for m in range(n):
            out[m] = _forward_one(Xv, m, beta0, B1v, Av, bv, nb, router,
                                  tau1, tau2, family, degree,
                                  &buf[0], &buf[k], &buf[2 * k], &buf[3 * k], &nx_val)
    return out_arr


def mse_and_grad(X, Y, beta0, B1, A, b, int router, double tau1, double tau2,
                 int family, int degree, nx=None):
    """Mean squared error and analytic gradient; see the numpy fallback."""
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[::1] Yv = np.ascontiguousarray(Y, dtype=np.float64)
    cdef const double[::1] b0 = np.ascontiguousarray(beta0, dtype=np.float64)
    cdef const double[:, ::1] B1v = np.ascontiguousarray(B1, dtype=np.float64)
    cdef const double[:, ::1] Av = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0]
    cdef Py_ssize_t k = b0.shape[0]
    cdef Py_ssize_t d = Xv.shape[1]

    d_beta0_arr = np.zeros(k)
    d_B1_arr = np.zeros((k, d))
    d_A_arr = np.zeros((k, d))
    d_b_arr = np.zeros(k)
    cdef double[::1] d_beta0 = d_beta0_arr
    cdef double[:, ::1] d_B1 = d_B1_arr
    cdef double[:, ::1] d_A = d_A_arr
    cdef double[::1] d_b = d_b_arr

    nb_arr = np.empty(k)
    cdef double[::1] nb = nb_arr
    buf_arr = np.empty(4 * k)
    cdef double[::1] buf = buf_arr
    cdef double* S
    cdef double* W
    cdef double* U
    cdef double* H

    cdef double mse = 0.0, scale = 2.0 / n
    cdef double f, e, nx_val, gz, c, inv1, inv2
    cdef Py_ssize_t m, i, u

    with nogil:
        S = &buf[0]
        W = &buf[k]
        U = &buf[2 * k]
        H = &buf[3 * k]
        _atom_norms(B1v, nb)
        for m in range(n):
            f = _forward_one(Xv, m, b0, B1v, Av, bv, nb, router, tau1, tau2,
                             family, degree, S, W, U, H, &nx_val)
            e = f - Yv[m]
            mse += e * e
            for i in range(k):
                gz = scale * e * W[i] * (H[i] - f)
                d_beta0[i] += gz
                if router == 0:
                    for u in range(d):
                        d_B1[i, u] += gz * Xv[m, u]
                elif router == 1:
                    if nb[i] >= DEGENERATE_NORM and nx_val >= DEGENERATE_NORM:
                        inv1 = 1.0 / (nb[i] * nx_val)
                        inv2 = S[i] / (nb[i] * nb[i])
                        for u in range(d):
                            d_B1[i, u] += gz * (Xv[m, u] * inv1 - inv2 * B1v[i, u])
                else:
                    inv1 = 1.0 / ((nb[i] + tau1) * (nx_val + tau2))
                    if nb[i] >= DEGENERATE_NORM:
                        inv2 = S[i] / ((nb[i] + tau1) * nb[i])
                    else:
                        inv2 = 0.0
                    for u in range(d):
                        d_B1[i, u] += gz * (Xv[m, u] * inv1 - inv2 * B1v[i, u])
                if family == 6:
                    d_b[i] += scale * e * W[i]
                else:
                    c = scale * e * W[i] * _dphi(family, degree, U[i])
                    for u in range(d):
                        d_A[i, u] += c * Xv[m, u]
                    d_b[i] += c
        mse /= n
    return mse, d_beta0_arr, d_B1_arr, d_A_arr, d_b_arr

# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-bin loss/gradient hot kernel.

Same contract as `_kernels_py.poly_loss_grad`; this version is what makes
multi-start per-bin maximum-likelihood refinement cheap.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()

COMPILED = True


cdef inline double _horner(const double[:, ::1] coeffs, Py_ssize_t row, double t) noexcept nogil:
    cdef Py_ssize_t k = coeffs.shape[1] - 1
    cdef double acc = coeffs[row, k]
    while k > 0:
        k -= 1
        acc = acc * t + coeffs[row, k]
    return acc


def poly_loss_grad(const double[:, ::1] coeffs1, const double[:, ::1] dcoeffs1,
                   const double[:, ::1] coeffs2, const double[:, ::1] dcoeffs2,
                   double mid, double halfspan,
                   const double[:, ::1] gamma_inv, const double[::1] y,
                   double d, double c, double p):
    """Fixed-covariance weighted-residual loss and its (d, c, p) gradient."""
    cdef Py_ssize_t m = coeffs1.shape[0]
    cdef double t1 = (c - 0.5 * d - mid) / halfspan
    cdef double t2 = (c + 0.5 * d - mid) / halfspan
    cdef double q = 1.0 - p

    cdef cnp.ndarray[double, ndim=1] r_arr = np.empty(m)
    cdef cnp.ndarray[double, ndim=2] jac_arr = np.empty((m, 3))
    cdef double[::1] r = r_arr
    cdef double[:, ::1] jac = jac_arr

    cdef Py_ssize_t i, j
    cdef double v1, v2, g1, g2, mu

    with nogil:
        for i in range(m):
            v1 = _horner(coeffs1, i, t1)
            g1 = _horner(dcoeffs1, i, t1) / halfspan
            if v1 < 0.0:
                v1 = 0.0
                g1 = 0.0
            elif v1 > 1.0:
                v1 = 1.0
                g1 = 0.0
            v2 = _horner(coeffs2, i, t2)
            g2 = _horner(dcoeffs2, i, t2) / halfspan
            if v2 < 0.0:
                v2 = 0.0
                g2 = 0.0
            elif v2 > 1.0:
                v2 = 1.0
                g2 = 0.0
            mu = p * v1 + q * v2
            r[i] = y[i] - mu
            jac[i, 0] = -0.5 * p * g1 + 0.5 * q * g2
            jac[i, 1] = p * g1 + q * g2
            jac[i, 2] = v1 - v2

    cdef cnp.ndarray[double, ndim=1] grad_arr = np.zeros(3)
    cdef double[::1] grad = grad_arr
    cdef double loss = 0.0
    cdef double gi

    with nogil:
        for i in range(m):
            gi = 0.0
            for j in range(m):
                gi += gamma_inv[i, j] * r[j]
            loss += r[i] * gi
            grad[0] -= 2.0 * jac[i, 0] * gi
            grad[1] -= 2.0 * jac[i, 1] * gi
            grad[2] -= 2.0 * jac[i, 2] * gi

    return loss, grad_arr

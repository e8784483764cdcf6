# cython: language_level=3
"""Compiled stencil kernels.

Arrays are laid out as (ny, nx), C-contiguous; axis 1 is the x direction
(first difference operator), axis 0 the y direction (second one).  Values
beyond the last node are the homogeneous Dirichlet ghost 0.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def gradient(const double[:, ::1] y, double hx, double hy, bint use_d2):
    cdef Py_ssize_t ny = y.shape[0], nx = y.shape[1], i, j
    d1_arr = np.empty((ny, nx))
    d2_arr = np.zeros((ny, nx))
    cdef double[:, ::1] d1 = d1_arr
    cdef double[:, ::1] d2 = d2_arr
    cdef double ihx = 1.0 / hx, ihy = 1.0 / hy
    for j in range(ny):
        for i in range(nx - 1):
            d1[j, i] = (y[j, i + 1] - y[j, i]) * ihx
        d1[j, nx - 1] = -y[j, nx - 1] * ihx
    if use_d2:
        for j in range(ny - 1):
            for i in range(nx):
                d2[j, i] = (y[j + 1, i] - y[j, i]) * ihy
        for i in range(nx):
            d2[ny - 1, i] = -y[ny - 1, i] * ihy
    return d1_arr, d2_arr


cdef void _adjoint_into(const double[:, ::1] q1, const double[:, ::1] q2,
                        double ihx, double ihy, bint use_d2,
                        double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t ny = q1.shape[0], nx = q1.shape[1], i, j
    for j in range(ny):
        out[j, 0] = -q1[j, 0] * ihx
        for i in range(1, nx):
            out[j, i] = (q1[j, i - 1] - q1[j, i]) * ihx
    if use_d2:
        for i in range(nx):
            out[0, i] -= q2[0, i] * ihy
        for j in range(1, ny):
            for i in range(nx):
                out[j, i] += (q2[j - 1, i] - q2[j, i]) * ihy


def gradient_adjoint(const double[:, ::1] q1, const double[:, ::1] q2,
                     double hx, double hy, bint use_d2):
    out_arr = np.empty((q1.shape[0], q1.shape[1]))
    cdef double[:, ::1] out = out_arr
    _adjoint_into(q1, q2, 1.0 / hx, 1.0 / hy, use_d2, out)
    return out_arr


def penalty(const double[:, ::1] y, const double[:, ::1] m,
            double hx, double hy, bint use_d2, bint box):
    """Quartic penalty value and gradient in one sweep.

    ``box`` selects the per-direction (max-norm) system, otherwise the
    Euclidean slope magnitude is penalised.
    """
    cdef Py_ssize_t ny = y.shape[0], nx = y.shape[1], i, j
    cdef double ihx = 1.0 / hx, ihy = 1.0 / hy
    cdef double u1, u2, m2, q, q1, q2, value = 0.0
    w1_arr = np.empty((ny, nx))
    w2_arr = np.zeros((ny, nx))
    grad_arr = np.empty((ny, nx))
    cdef double[:, ::1] w1 = w1_arr
    cdef double[:, ::1] w2 = w2_arr
    cdef double[:, ::1] grad = grad_arr
    with nogil:
        for j in range(ny):
            for i in range(nx):
                if i + 1 < nx:
                    u1 = (y[j, i + 1] - y[j, i]) * ihx
                else:
                    u1 = -y[j, i] * ihx
                u2 = 0.0
                if use_d2:
                    if j + 1 < ny:
                        u2 = (y[j + 1, i] - y[j, i]) * ihy
                    else:
                        u2 = -y[j, i] * ihy
                m2 = m[j, i] * m[j, i]
                if box:
                    q1 = u1 * u1 - m2
                    q2 = u2 * u2 - m2 if use_d2 else 0.0
                    if q1 < 0.0:
                        q1 = 0.0
                    if q2 < 0.0:
                        q2 = 0.0
                    value += q1 * q1 + q2 * q2
                    w1[j, i] = q1 * u1
                    w2[j, i] = q2 * u2
                else:
                    q = u1 * u1 + u2 * u2 - m2
                    if q < 0.0:
                        q = 0.0
                    value += q * q
                    w1[j, i] = q * u1
                    w2[j, i] = q * u2
        _adjoint_into(w1, w2, ihx, ihy, use_d2, grad)
    return 0.25 * value, grad_arr

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; same signatures and results as ``_numpy``.

The GELU forward stays on numpy's vectorized tanh, which beats a scalar libm loop.
"""

import numpy as np

from ._numpy import gelu_forward
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


cdef inline double fast_tanh(double z) noexcept nogil:
    # exp(2z) overflows to inf for large z, which still yields 1.0
    return 1.0 - 2.0 / (exp(2.0 * z) + 1.0)


cdef inline double dot(const double* a, const double* b, Py_ssize_t n) noexcept nogil:
    cdef double s = 0.0
    cdef Py_ssize_t d
    for d in range(n):
        s += a[d] * b[d]
    return s


cdef inline void axpy(double alpha, const double* x, double* y, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t d
    for d in range(n):
        y[d] += alpha * x[d]


def attention_forward(const double[:, :, :, ::1] q, const double[:, :, :, ::1] k,
                      const double[:, :, :, ::1] v, const unsigned char[:, :, ::1] allowed):
    cdef Py_ssize_t B = q.shape[0], H = q.shape[1], T = q.shape[2], dh = q.shape[3]
    cdef Py_ssize_t b, h, i, j
    cdef double scale = 1.0 / sqrt(<double>dh)
    cdef double s, m, tot, inv
    out_arr = np.zeros((B, H, T, dh))
    probs_arr = np.zeros((B, H, T, T))
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, :, ::1] probs = probs_arr
    cdef const double* qb
    cdef const double* kb
    cdef const double* vb
    cdef const unsigned char* ok
    cdef double* row
    cdef double* ob
    with nogil:
        for b in range(B):
            for h in range(H):
                qb = &q[b, h, 0, 0]
                kb = &k[b, h, 0, 0]
                vb = &v[b, h, 0, 0]
                for i in range(T):
                    ok = &allowed[b, i, 0]
                    row = &probs[b, h, i, 0]
                    m = -1e308
                    for j in range(i + 1):
                        if ok[j]:
                            s = dot(qb + i * dh, kb + j * dh, dh) * scale
                            row[j] = s
                            if s > m:
                                m = s
                    tot = 0.0
                    for j in range(i + 1):
                        if ok[j]:
                            row[j] = exp(row[j] - m)
                            tot += row[j]
                    inv = 1.0 / tot
                    ob = &out[b, h, i, 0]
                    for j in range(i + 1):
                        if ok[j]:
                            row[j] = row[j] * inv
                            axpy(row[j], vb + j * dh, ob, dh)
    return out_arr, probs_arr


def attention_backward(const double[:, :, :, ::1] dout, const double[:, :, :, ::1] q,
                       const double[:, :, :, ::1] k, const double[:, :, :, ::1] v,
                       const double[:, :, :, ::1] probs):
    cdef Py_ssize_t B = q.shape[0], H = q.shape[1], T = q.shape[2], dh = q.shape[3]
    cdef Py_ssize_t b, h, i, j
    cdef double scale = 1.0 / sqrt(<double>dh)
    cdef double p, srow, ds
    dq_arr = np.zeros((B, H, T, dh))
    dk_arr = np.zeros((B, H, T, dh))
    dv_arr = np.zeros((B, H, T, dh))
    dp_arr = np.empty(T)
    cdef double[:, :, :, ::1] dq = dq_arr
    cdef double[:, :, :, ::1] dk = dk_arr
    cdef double[:, :, :, ::1] dv = dv_arr
    cdef double[::1] dprow = dp_arr
    cdef const double* row
    cdef const double* go
    cdef const double* qb
    cdef const double* kb
    cdef const double* vb
    cdef double* dqb
    cdef double* dkb
    cdef double* dvb
    with nogil:
        for b in range(B):
            for h in range(H):
                qb = &q[b, h, 0, 0]
                kb = &k[b, h, 0, 0]
                vb = &v[b, h, 0, 0]
                dqb = &dq[b, h, 0, 0]
                dkb = &dk[b, h, 0, 0]
                dvb = &dv[b, h, 0, 0]
                for i in range(T):
                    row = &probs[b, h, i, 0]
                    go = &dout[b, h, i, 0]
                    srow = 0.0
                    for j in range(i + 1):
                        p = row[j]
                        if p != 0.0:
                            dprow[j] = dot(go, vb + j * dh, dh)
                            axpy(p, go, dvb + j * dh, dh)
                            srow += p * dprow[j]
                    for j in range(i + 1):
                        p = row[j]
                        if p != 0.0:
                            ds = p * (dprow[j] - srow) * scale
                            axpy(ds, kb + j * dh, dqb + i * dh, dh)
                            axpy(ds, qb + i * dh, dkb + j * dh, dh)
    return dq_arr, dk_arr, dv_arr


def layernorm_forward(const double[:, ::1] x, const double[::1] g, const double[::1] beta,
                      double eps=1e-5):
    cdef Py_ssize_t N = x.shape[0], D = x.shape[1], n, d
    cdef double mu, var, r, c
    y_arr = np.empty((N, D))
    xhat_arr = np.empty((N, D))
    rstd_arr = np.empty(N)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    with nogil:
        for n in range(N):
            mu = 0.0
            for d in range(D):
                mu = mu + x[n, d]
            mu = mu / D
            var = 0.0
            for d in range(D):
                c = x[n, d] - mu
                var = var + c * c
            r = 1.0 / sqrt(var / D + eps)
            rstd[n] = r
            for d in range(D):
                c = (x[n, d] - mu) * r
                xhat[n, d] = c
                y[n, d] = c * g[d] + beta[d]
    return y_arr, xhat_arr, rstd_arr


def layernorm_backward(const double[:, ::1] dy, const double[:, ::1] xhat,
                       const double[::1] rstd, const double[::1] g):
    cdef Py_ssize_t N = dy.shape[0], D = dy.shape[1], n, d
    cdef double m1, m2, t
    dx_arr = np.empty((N, D))
    cdef double[:, ::1] dx = dx_arr
    with nogil:
        for n in range(N):
            m1 = 0.0
            m2 = 0.0
            for d in range(D):
                t = dy[n, d] * g[d]
                m1 = m1 + t
                m2 = m2 + t * xhat[n, d]
            m1 = m1 / D
            m2 = m2 / D
            for d in range(D):
                dx[n, d] = (dy[n, d] * g[d] - m1 - xhat[n, d] * m2) * rstd[n]
    return dx_arr


def gelu_backward(dy, u):
    cdef cnp.ndarray[double, ndim=1] uf = np.ascontiguousarray(u, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[double, ndim=1] df = np.ascontiguousarray(dy, dtype=np.float64).reshape(-1)
    out_arr = np.empty_like(uf)
    cdef double[::1] us = uf
    cdef double[::1] ds = df
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, n = uf.shape[0]
    cdef double x, x2, t
    with nogil:
        for i in range(n):
            x = us[i]
            x2 = x * x
            t = fast_tanh(GELU_C * x * (1.0 + GELU_A * x2))
            out[i] = ds[i] * (0.5 * (1.0 + t)
                              + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x2))
    return out_arr.reshape(np.shape(u))

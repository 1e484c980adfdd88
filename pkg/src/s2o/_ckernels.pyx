# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_pykernels`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, NAN

cnp.import_array()


def power_iteration(gram, start, double tol, Py_ssize_t max_iter):
    cdef double[:, ::1] g = np.ascontiguousarray(gram, dtype=np.float64)
    cdef Py_ssize_t n = g.shape[0]
    cdef double[::1] v = np.array(start, dtype=np.float64)
    cdef double[::1] w = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j, it
    cdef double nrm = 0.0, mu = 0.0, acc, res, wn

    for i in range(n):
        nrm += v[i] * v[i]
    if nrm == 0.0:
        return 0.0, 0, True
    nrm = sqrt(nrm)
    for i in range(n):
        v[i] /= nrm

    for it in range(1, max_iter + 1):
        mu = 0.0
        wn = 0.0
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += g[i, j] * v[j]
            w[i] = acc
            mu += v[i] * acc
            wn += acc * acc
        if mu <= 0.0:
            return max(mu, 0.0), it, wn == 0.0
        res = 0.0
        for i in range(n):
            acc = w[i] - mu * v[i]
            res += acc * acc
        if sqrt(res) <= tol * mu:
            return mu, it, True
        wn = sqrt(wn)
        for i in range(n):
            v[i] = w[i] / wn
    return mu, max_iter, False


def cholesky_logdet(mat, double damping):
    cdef double[:, ::1] a = np.array(mat, dtype=np.float64, order="C")
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double s, acc, total = 0.0
    for i in range(n):
        a[i, i] += damping
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= a[j, k] * a[j, k]
        if not s > 0.0:
            return NAN
        s = sqrt(s)
        a[j, j] = s
        total += log(s)
        for i in range(j + 1, n):
            acc = a[i, j]
            for k in range(j):
                acc -= a[i, k] * a[j, k]
            a[i, j] = acc / s
    return 2.0 * total


def kron_marginals(corr, Py_ssize_t rows, Py_ssize_t cols):
    cdef double[:, ::1] r = np.ascontiguousarray(corr, dtype=np.float64)
    col_arr = np.zeros((cols, cols), dtype=np.float64)
    row_arr = np.zeros((rows, rows), dtype=np.float64)
    cdef double[:, ::1] cg = col_arr
    cdef double[:, ::1] rg = row_arr
    cdef Py_ssize_t i, j, k, l
    cdef double acc
    for k in range(cols):
        for l in range(cols):
            acc = 0.0
            for i in range(rows):
                acc += r[i * cols + k, i * cols + l]
            cg[k, l] = acc
    for i in range(rows):
        for j in range(rows):
            acc = 0.0
            for k in range(cols):
                acc += r[i * cols + k, j * cols + k]
            rg[i, j] = acc
    return col_arr, row_arr

# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled numeric kernels. Same surface as ``numpy_backend``; see there
for the shape/dtype contract."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as cexp, log as clog, sqrt as csqrt, pow as cpow

cnp.import_array()

NAME = "compiled"


# ---- elementwise (1-D) ----

def ewise_add(double[::1] x, double[::1] y):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = x[i] + y[i]
    return out_arr


def ewise_sub(double[::1] x, double[::1] y):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = x[i] - y[i]
    return out_arr


def ewise_mul(double[::1] x, double[::1] y):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = x[i] * y[i]
    return out_arr


def scalar_mul(double[::1] x, double c):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = x[i] * c
    return out_arr


def relu(double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = x[i] if x[i] > 0.0 else 0.0
    return out_arr


def relu_grad(double[::1] x, double[::1] g):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = g[i] if x[i] > 0.0 else 0.0
    return out_arr


def log(double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = clog(x[i])
    return out_arr


def log_grad(double[::1] x, double[::1] g):
    cdef Py_ssize_t i, n = x.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = g[i] / x[i]
    return out_arr


def reduce_sum(double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double acc = 0.0
    for i in range(n):
        acc += x[i]
    return acc


# ---- matrix (2-D) ----

def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t i, j, k
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    out_arr = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double aik
    for i in range(m):
        for k in range(kk):
            aik = a[i, k]
            for j in range(n):
                out[i, j] += aik * b[k, j]
    return out_arr


def matmul_grad_a(double[:, ::1] g, double[:, ::1] b):
    # g: (m, n), b: (k, n) -> g @ b.T: (m, k)
    cdef Py_ssize_t i, j, k
    cdef Py_ssize_t m = g.shape[0], n = g.shape[1], kk = b.shape[0]
    out_arr = np.zeros((m, kk), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double acc
    for i in range(m):
        for k in range(kk):
            acc = 0.0
            for j in range(n):
                acc += g[i, j] * b[k, j]
            out[i, k] = acc
    return out_arr


def matmul_grad_b(double[:, ::1] a, double[:, ::1] g):
    # a: (m, k), g: (m, n) -> a.T @ g: (k, n)
    cdef Py_ssize_t i, j, k
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = g.shape[1]
    out_arr = np.zeros((kk, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double aik
    for i in range(m):
        for k in range(kk):
            aik = a[i, k]
            for j in range(n):
                out[k, j] += aik * g[i, j]
    return out_arr


def add_bias(double[:, ::1] x, double[::1] b):
    cdef Py_ssize_t i, j, m = x.shape[0], n = x.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(m):
        for j in range(n):
            out[i, j] = x[i, j] + b[j]
    return out_arr


def bias_grad(double[:, ::1] g):
    cdef Py_ssize_t i, j, m = g.shape[0], n = g.shape[1]
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(m):
        for j in range(n):
            out[j] += g[i, j]
    return out_arr


def row_sum(double[:, ::1] a):
    cdef Py_ssize_t i, j, m = a.shape[0], n = a.shape[1]
    out_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double acc
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += a[i, j]
        out[i] = acc
    return out_arr


def gather_rows(double[:, ::1] a, cnp.int64_t[::1] idx):
    cdef Py_ssize_t i, j, b = idx.shape[0], n = a.shape[1]
    out_arr = np.empty((b, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r
    for i in range(b):
        r = <Py_ssize_t> idx[i]
        for j in range(n):
            out[i, j] = a[r, j]
    return out_arr


def scatter_rows_add(double[:, ::1] out, cnp.int64_t[::1] idx, double[:, ::1] g):
    cdef Py_ssize_t i, j, b = idx.shape[0], n = out.shape[1]
    cdef Py_ssize_t r
    for i in range(b):
        r = <Py_ssize_t> idx[i]
        for j in range(n):
            out[r, j] += g[i, j]


def take_per_row(double[:, ::1] a, cnp.int64_t[::1] idx):
    cdef Py_ssize_t i, m = a.shape[0]
    out_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(m):
        out[i] = a[i, <Py_ssize_t> idx[i]]
    return out_arr


def put_per_row_add(double[:, ::1] out, cnp.int64_t[::1] idx, double[::1] g):
    cdef Py_ssize_t i, m = out.shape[0]
    for i in range(m):
        out[i, <Py_ssize_t> idx[i]] += g[i]


def softmax_rows(double[:, ::1] z, double t):
    cdef Py_ssize_t i, j, m = z.shape[0], n = z.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double mx, s, v
    for i in range(m):
        mx = z[i, 0] / t
        for j in range(1, n):
            v = z[i, j] / t
            if v > mx:
                mx = v
        s = 0.0
        for j in range(n):
            v = cexp(z[i, j] / t - mx)
            out[i, j] = v
            s += v
        for j in range(n):
            out[i, j] /= s
    return out_arr


def softmax_rows_grad(double[:, ::1] y, double[:, ::1] g, double t):
    cdef Py_ssize_t i, j, m = y.shape[0], n = y.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double s
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += g[i, j] * y[i, j]
        for j in range(n):
            out[i, j] = y[i, j] * (g[i, j] - s) / t
    return out_arr


def log_softmax_rows(double[:, ::1] z, double t):
    cdef Py_ssize_t i, j, m = z.shape[0], n = z.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double mx, s, v
    for i in range(m):
        mx = z[i, 0] / t
        for j in range(1, n):
            v = z[i, j] / t
            if v > mx:
                mx = v
        s = 0.0
        for j in range(n):
            v = z[i, j] / t - mx
            out[i, j] = v
            s += cexp(v)
        s = clog(s)
        for j in range(n):
            out[i, j] -= s
    return out_arr


def log_softmax_rows_grad(double[:, ::1] lp, double[:, ::1] g, double t):
    cdef Py_ssize_t i, j, m = lp.shape[0], n = lp.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double s
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += g[i, j]
        for j in range(n):
            out[i, j] = (g[i, j] - cexp(lp[i, j]) * s) / t
    return out_arr


def l2_normalize_rows(double[:, ::1] v):
    cdef Py_ssize_t i, j, m = v.shape[0], n = v.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    norms_arr = np.empty((m, 1), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] norms = norms_arr
    cdef double s
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += v[i, j] * v[i, j]
        s = csqrt(s)
        norms[i, 0] = s
        for j in range(n):
            out[i, j] = v[i, j] / s
    return out_arr, norms_arr


def l2_normalize_rows_grad(double[:, ::1] u, double[:, ::1] norms, double[:, ::1] g):
    cdef Py_ssize_t i, j, m = u.shape[0], n = u.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double s
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += g[i, j] * u[i, j]
        for j in range(n):
            out[i, j] = (g[i, j] - u[i, j] * s) / norms[i, 0]
    return out_arr


# ---- optimizer updates (in place) ----

def adam_step(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
              long long t, double lr, double beta1, double beta2,
              double eps, double wd):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - cpow(beta1, <double> t)
    cdef double bc2 = 1.0 - cpow(beta2, <double> t)
    for i in range(n):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        if wd != 0.0:
            p[i] *= 1.0 - wd
        if lr != 0.0:
            p[i] -= lr * (m[i] / bc1) / (csqrt(v[i] / bc2) + eps)


def sgd_momentum_step(double[::1] p, double[::1] g, double[::1] buf,
                      double lr, double momentum, double wd):
    cdef Py_ssize_t i, n = p.shape[0]
    for i in range(n):
        buf[i] = momentum * buf[i] + g[i]
        if wd != 0.0:
            p[i] *= 1.0 - wd
        if lr != 0.0:
            p[i] -= lr * buf[i]

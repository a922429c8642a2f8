# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled slot kernels. Must stay bit-identical to ``_fallback``."""

from libc.math cimport nearbyint


def quantize(double[::1] x, Py_ssize_t n, double scale):
    cdef Py_ssize_t i
    for i in range(n):
        x[i] = nearbyint(x[i] * scale) / scale


def mul_quantize(const double[::1] a, const double[::1] b, double[::1] out,
                 Py_ssize_t n, double scale):
    cdef Py_ssize_t i
    cdef double p
    for i in range(n):
        p = a[i] * b[i]
        out[i] = nearbyint(p * scale) / scale


def scale_quantize(const double[::1] a, double s, double[::1] out,
                   Py_ssize_t n, double scale):
    cdef Py_ssize_t i
    cdef double p
    for i in range(n):
        p = a[i] * s
        out[i] = nearbyint(p * scale) / scale


def rotate(const double[::1] a, Py_ssize_t steps, double[::1] out):
    cdef Py_ssize_t L = a.shape[0]
    cdef Py_ssize_t i, head = L - steps
    for i in range(head):
        out[i] = a[i + steps]
    for i in range(head, L):
        out[i] = a[i - head]


def rotate_add(const double[::1] a, Py_ssize_t steps, double[::1] out):
    cdef Py_ssize_t L = a.shape[0]
    cdef Py_ssize_t i, head = L - steps
    for i in range(head):
        out[i] = a[i] + a[i + steps]
    for i in range(head, L):
        out[i] = a[i] + a[i - head]


def sgd_epoch(double[:, ::1] U, double[:, ::1] V,
              const long[::1] users, const long[::1] items,
              const double[::1] ratings,
              double alpha, double lam, double mu, double grad_scale):
    """One exact-arithmetic pass of per-rating SGD, in visitation order."""
    cdef Py_ssize_t k = U.shape[1]
    cdef Py_ssize_t idx, f, u, v
    cdef double dot, err, uf, vf
    for idx in range(users.shape[0]):
        u = users[idx]
        v = items[idx]
        dot = 0.0
        for f in range(k):
            dot += U[u, f] * V[v, f]
        err = (ratings[idx] - dot) * grad_scale
        for f in range(k):
            uf = U[u, f]
            vf = V[v, f]
            U[u, f] = uf + alpha * (err * vf - lam * uf)
            V[v, f] = vf + alpha * (err * uf - mu * vf)

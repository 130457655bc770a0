# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for designs made of a dense block plus one-nonzero-per-row
blocks (fixed-effect dummies and label-specific trends).

Column layout of the implied matrix X (N x K): the ``d`` dense columns first,
then block ``b`` occupies columns ``offsets[b] .. offsets[b] + n_b - 1``.
Row ``i`` of block ``b`` has a single nonzero ``vals[b, i]`` in column
``offsets[b] + codes[b, i]``, or no nonzero when ``codes[b, i] < 0``.
Block offsets must be strictly increasing.
"""

import numpy as np

from libc.math cimport exp, log1p


def gram(const double[:, ::1] D, const Py_ssize_t[:, ::1] codes,
         const double[:, ::1] vals, const Py_ssize_t[::1] offsets,
         const double[::1] w, Py_ssize_t K):
    """Return X' diag(w) X."""
    cdef Py_ssize_t N = D.shape[0], d = D.shape[1], nb = codes.shape[0]
    cdef Py_ssize_t i, j, k, b, b2, c, c2, col, col2
    cdef double wi, a, v
    out = np.zeros((K, K), dtype=np.float64)
    cdef double[:, ::1] g = out
    for i in range(N):
        wi = w[i]
        if wi == 0.0:
            continue
        for j in range(d):
            a = wi * D[i, j]
            for k in range(j, d):
                g[j, k] += a * D[i, k]
        for b in range(nb):
            c = codes[b, i]
            if c < 0:
                continue
            col = offsets[b] + c
            v = vals[b, i]
            a = wi * v
            for j in range(d):
                g[j, col] += a * D[i, j]
            g[col, col] += a * v
            for b2 in range(b):
                c2 = codes[b2, i]
                if c2 < 0:
                    continue
                col2 = offsets[b2] + c2
                g[col2, col] += a * vals[b2, i]
    for j in range(K):
        for k in range(j + 1, K):
            g[k, j] = g[j, k]
    return out


def xtv(const double[:, ::1] D, const Py_ssize_t[:, ::1] codes,
        const double[:, ::1] vals, const Py_ssize_t[::1] offsets,
        const double[::1] w, const double[::1] v, Py_ssize_t K):
    """Return X' (w * v)."""
    cdef Py_ssize_t N = D.shape[0], d = D.shape[1], nb = codes.shape[0]
    cdef Py_ssize_t i, j, b, c
    cdef double a
    out = np.zeros(K, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(N):
        a = w[i] * v[i]
        if a == 0.0:
            continue
        for j in range(d):
            o[j] += a * D[i, j]
        for b in range(nb):
            c = codes[b, i]
            if c >= 0:
                o[offsets[b] + c] += a * vals[b, i]
    return out


def matvec(const double[:, ::1] D, const Py_ssize_t[:, ::1] codes,
           const double[:, ::1] vals, const Py_ssize_t[::1] offsets,
           const double[::1] beta):
    """Return X @ beta."""
    cdef Py_ssize_t N = D.shape[0], d = D.shape[1], nb = codes.shape[0]
    cdef Py_ssize_t i, j, b, c
    cdef double s
    out = np.empty(N, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(N):
        s = 0.0
        for j in range(d):
            s += D[i, j] * beta[j]
        for b in range(nb):
            c = codes[b, i]
            if c >= 0:
                s += vals[b, i] * beta[offsets[b] + c]
        o[i] = s
    return out


def group_sum(const double[:, ::1] M, const Py_ssize_t[::1] gid, Py_ssize_t G):
    """Row sums of M within groups: out[g] = sum over rows i with gid[i] == g."""
    cdef Py_ssize_t N = M.shape[0], K = M.shape[1], i, j, g
    out = np.zeros((G, K), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(N):
        g = gid[i]
        for j in range(K):
            o[g, j] += M[i, j]
    return out


cdef inline double _softplus(double e) nogil:
    # log(1 + exp(e)) without overflow
    if e > 0:
        return e + log1p(exp(-e))
    return log1p(exp(e))


def binomial_loglik(const double[::1] s, const double[::1] n, const double[::1] eta):
    """sum s*eta - n*log(1 + exp(eta)), i.e. sum s ln p + (n - s) ln(1 - p)."""
    cdef Py_ssize_t i, N = eta.shape[0]
    cdef double acc = 0.0
    for i in range(N):
        acc += s[i] * eta[i] - n[i] * _softplus(eta[i])
    return acc


def logit_working(const double[::1] s, const double[::1] n, const double[::1] eta):
    """IRLS working weights W = n p (1 - p) and responses z = eta + (s - n p) / W."""
    cdef Py_ssize_t i, N = eta.shape[0]
    W = np.empty(N, dtype=np.float64)
    z = np.empty(N, dtype=np.float64)
    cdef double[::1] w_ = W, z_ = z
    cdef double p, e, wi
    for i in range(N):
        e = eta[i]
        if e >= 0:
            p = 1.0 / (1.0 + exp(-e))
        else:
            p = exp(e)
            p = p / (1.0 + p)
        wi = n[i] * p * (1.0 - p)
        if wi < 1e-300:
            wi = 1e-300
        w_[i] = wi
        z_[i] = e + (s[i] - n[i] * p) / wi
    return W, z

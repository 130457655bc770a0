"""Pure-numpy versions of the compiled kernels (same signatures as ``_core``)."""

from __future__ import annotations

import numpy as np


def materialize(D, codes, vals, offsets, K):
    """Dense N x K matrix implied by a dense block plus one-nonzero blocks."""
    N, d = D.shape
    X = np.zeros((N, K))
    X[:, :d] = D
    rows = np.arange(N)
    for b in range(codes.shape[0]):
        c = codes[b]
        hit = c >= 0
        X[rows[hit], offsets[b] + c[hit]] = vals[b, hit]
    return X


def gram(D, codes, vals, offsets, w, K, X=None):
    if X is None:
        X = materialize(D, codes, vals, offsets, K)
    return (X * w[:, None]).T @ X


def xtv(D, codes, vals, offsets, w, v, K, X=None):
    if X is None:
        X = materialize(D, codes, vals, offsets, K)
    return X.T @ (w * v)


def matvec(D, codes, vals, offsets, beta, X=None):
    if X is None:
        X = materialize(D, codes, vals, offsets, beta.size)
    return X @ beta


def group_sum(M, gid, G):
    out = np.empty((G, M.shape[1]))
    for j in range(M.shape[1]):
        out[:, j] = np.bincount(gid, weights=M[:, j], minlength=G)
    return out


def binomial_loglik(s, n, eta):
    return float(np.sum(s * eta - n * np.logaddexp(0.0, eta)))


def logit_working(s, n, eta):
    p = 1.0 / (1.0 + np.exp(-eta))
    W = np.maximum(n * p * (1.0 - p), 1e-300)
    return W, eta + (s - n * p) / W

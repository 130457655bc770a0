"""Weighted least squares, grouped binomial logit (IRLS) and the cluster-robust
sandwich covariance.

The reported logit log-likelihood omits the ``ln C(n, s)`` terms. They do not
depend on the cutoff, so argmax and likelihood-ratio differences are
unaffected, but values are only comparable within one dataset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.special import expit, xlogy

from . import _kernels
from .design import DesignMatrix
from .errors import SeparationDetected, SingularDesign, TooFewClusters

#: IRLS settings
MAX_ITER = 100
DEV_TOL = 1e-8
COEF_RTOL = 1e-10
MAX_HALVINGS = 20
#: |eta| beyond this (p < 2.1e-9) means fitted probabilities are pinned at 0 or 1;
#: a diverging coefficient stalls near |eta| = 24 once the deviance change drops below DEV_TOL
SEPARATION_ETA = 20.0


@dataclass(frozen=True, eq=False)
class FitResult:
    """Output of :func:`wls_fit` or :func:`binomial_logit_fit`.

    For the logit, ``fitted`` holds probabilities, ``residuals`` are response
    residuals ``s/n - p``, and ``working_weights`` / ``working_residuals`` are
    the IRLS quantities at the final iterate (``W * e == s - n p``). For WLS
    they are the analytic weights and ``y - X b``.
    """

    names: tuple[str, ...]
    coefficients: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    working_weights: np.ndarray
    working_residuals: np.ndarray
    dof_residual: int
    kind: str
    converged: bool = True
    iterations: int = 0
    loglik: float = float("nan")
    deviance: float = float("nan")
    rss: float = float("nan")
    separated: bool = False

    @property
    def usable(self) -> bool:
        """False when the fit must not enter an objective comparison."""
        return self.converged and not self.separated

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])


def wls_fit(dm: DesignMatrix) -> FitResult:
    """Minimise ``sum w (y - X b)^2`` by a QR factorisation of ``sqrt(w) X``.

    Raises
    ------
    SingularDesign
        The weighted design is numerically rank deficient.
    """
    X, y, w = dm.X, dm.response, dm.weights
    if np.any(w <= 0):
        raise SingularDesign("weights must be strictly positive")
    sw = np.sqrt(w)
    Q, R = sla.qr(X * sw[:, None], mode="economic")
    d = np.abs(np.diag(R))
    if d.size and (d.min() <= 1e-12 * d.max() or not np.all(np.isfinite(d))):
        raise SingularDesign("weighted design is rank deficient")
    if y.size and "intercept" in dm.columns and np.all(y == y[0]):
        # constant response: exact solution, no rounding noise in the other coefficients
        b = np.zeros(dm.n_cols)
        b[dm.columns.index("intercept")] = y[0]
    else:
        b = sla.solve_triangular(R, Q.T @ (sw * y))
    fitted = X @ b
    e = y - fitted
    return FitResult(
        names=dm.columns, coefficients=b, fitted=fitted, residuals=e,
        working_weights=w, working_residuals=e, dof_residual=dm.n_rows - dm.n_cols,
        kind="wls", rss=float(np.sum(w * e * e)),
    )


def _design_rows(dm: DesignMatrix, a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.size != dm.n_rows:
        a = a[dm.row_index]
    return a


def binomial_loglik(s: np.ndarray, n: np.ndarray, eta: np.ndarray) -> float:
    """``sum s ln p + (n - s) ln(1 - p)`` with ``p = expit(eta)``, computed stably."""
    return _kernels.binomial_loglik(s, n, eta)


def _saturated_loglik(s: np.ndarray, n: np.ndarray) -> float:
    f = s / n
    return float(np.sum(xlogy(s, f) + xlogy(n - s, 1.0 - f)))


def _solve_pd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return sla.cho_solve(sla.cho_factor(A, check_finite=False), b, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        return sol


def binomial_logit_fit(
    dm: DesignMatrix,
    successes,
    trials,
    *,
    start: np.ndarray | None = None,
    max_iter: int = MAX_ITER,
    on_separation: str = "raise",
) -> FitResult:
    """Grouped binomial logit by IRLS with step-halving.

    Iteration stops when the deviance changes by less than ``DEV_TOL`` or the
    largest relative coefficient change is below ``COEF_RTOL``; a stop on the
    deviance test is followed by one polishing Newton step. A step that
    increases the deviance is halved, up to ``MAX_HALVINGS`` times. Hitting
    ``max_iter`` returns ``converged=False`` instead of raising.

    Parameters
    ----------
    dm : DesignMatrix
    successes, trials : array_like
        Per design row (or per dataset row, indexed by ``dm.row_index``).
    start : ndarray, optional
        Starting coefficients. Default: one WLS step from the empirical logits.
    on_separation : {"raise", "flag"}
        What to do when fitted probabilities are pinned at 0 or 1.

    Raises
    ------
    SeparationDetected
        Only with ``on_separation="raise"``.
    """
    s = _design_rows(dm, successes)
    n = _design_rows(dm, trials)
    if np.any(s > n) or np.any(s < 0):
        raise ValueError("need 0 <= successes <= trials")
    if np.any(n < 1):
        raise ValueError("trials must be >= 1 on every row")
    st = dm.structure
    ll_sat = _saturated_loglik(s, n)

    if start is None:
        mu = (s + 0.5) / (n + 1.0)
        eta = np.log(mu / (1.0 - mu))
        W = n * mu * (1.0 - mu)
        z = eta + (s - n * mu) / W
        beta = _solve_pd(_kernels.gram(st, W), _kernels.xtv(st, W, z))
    else:
        beta = np.asarray(start, dtype=np.float64).copy()
    eta = _kernels.matvec(st, beta)
    dev = 2.0 * (ll_sat - binomial_loglik(s, n, eta))

    converged = False
    it = 0
    rel = np.inf
    for it in range(1, max_iter + 1):
        W, z = _kernels.logit_working(s, n, eta)
        target = _solve_pd(_kernels.gram(st, W), _kernels.xtv(st, W, z))
        step = target - beta
        new_beta = target
        new_eta = _kernels.matvec(st, new_beta)
        new_dev = 2.0 * (ll_sat - binomial_loglik(s, n, new_eta))
        halvings = 0
        while not (new_dev <= dev + 1e-12 * abs(dev)) and halvings < MAX_HALVINGS:
            step = 0.5 * step
            new_beta = beta + step
            new_eta = _kernels.matvec(st, new_beta)
            new_dev = 2.0 * (ll_sat - binomial_loglik(s, n, new_eta))
            halvings += 1
        if not np.isfinite(new_dev):
            break
        if new_dev > dev:
            # no descent direction left within the halving budget
            converged = abs(new_dev - dev) < DEV_TOL
            break
        dchange = abs(dev - new_dev)
        rel = np.max(np.abs(new_beta - beta)) / max(np.max(np.abs(new_beta)), 1e-300)
        beta, eta, dev = new_beta, new_eta, new_dev
        if dchange < DEV_TOL or rel < COEF_RTOL:
            converged = True
            break

    if converged and rel >= COEF_RTOL:
        # the deviance test fires one Newton step early: the coefficient error
        # is then about sqrt(DEV_TOL), so take one more step if it does not ascend
        W, z = _kernels.logit_working(s, n, eta)
        new_beta = _solve_pd(_kernels.gram(st, W), _kernels.xtv(st, W, z))
        new_eta = _kernels.matvec(st, new_beta)
        new_dev = 2.0 * (ll_sat - binomial_loglik(s, n, new_eta))
        if np.isfinite(new_dev) and new_dev <= dev + 1e-12 * abs(dev):
            beta, eta, dev = new_beta, new_eta, new_dev

    separated = bool(np.max(np.abs(eta)) > SEPARATION_ETA) if eta.size else False
    if separated and on_separation == "raise":
        raise SeparationDetected(
            f"fitted probabilities pinned at 0/1 (max |eta| = {np.max(np.abs(eta)):.1f})"
        )
    p = expit(eta)
    W = n * p * (1.0 - p)
    with np.errstate(divide="ignore", invalid="ignore"):
        e_work = (s - n * p) / W
    ll = binomial_loglik(s, n, eta)
    return FitResult(
        names=dm.columns, coefficients=beta, fitted=p, residuals=s / n - p,
        working_weights=W, working_residuals=e_work, dof_residual=dm.n_rows - dm.n_cols,
        kind="logit", converged=converged, iterations=it, loglik=ll,
        deviance=2.0 * (ll_sat - ll), separated=separated,
    )


@dataclass(frozen=True, eq=False)
class ClusteredCov:
    matrix: np.ndarray
    n_clusters: int
    correction: float
    names: tuple[str, ...] = ()

    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.matrix), 0.0))


def cr1_factor(G: int, N: int, K: int) -> float:
    """``[G / (G - 1)] * [(N - 1) / (N - K)]``."""
    return (G / (G - 1.0)) * ((N - 1.0) / (N - K))


def cluster_cov(dm: DesignMatrix, fit: FitResult, *, correction: str = "cr1") -> ClusteredCov:
    """Cluster-robust sandwich ``A^-1 (sum_g s_g s_g') A^-1`` with ``A = X'WX``.

    Scores are ``s_g = sum_{i in g} w_i x_i e_i`` using the fit's working
    weights and residuals, so the same construction covers WLS and IRLS.
    ``correction="cr1"`` multiplies by :func:`cr1_factor`; ``"none"`` does not.

    Raises
    ------
    TooFewClusters
        Fewer than two clusters.
    """
    G = dm.n_clusters
    if G < 2:
        raise TooFewClusters(f"need at least 2 clusters, got {G}")
    N, K = dm.n_rows, dm.n_cols
    st = dm.structure
    W = fit.working_weights
    u = W * fit.working_residuals
    u = np.where(np.isfinite(u), u, 0.0)
    A = _kernels.gram(st, W)
    scores = _kernels.group_sum(dm.X * u[:, None], dm.cluster_codes, G)
    meat = scores.T @ scores
    try:
        bread = sla.cho_solve(sla.cho_factor(A), np.eye(K))
    except np.linalg.LinAlgError as exc:
        raise SingularDesign("X'WX is not positive definite") from exc
    if correction == "cr1":
        factor = cr1_factor(G, N, K)
    elif correction == "none":
        factor = 1.0
    else:
        raise ValueError(f"unknown small-sample correction {correction!r}")
    V = factor * (bread @ meat @ bread)
    V = 0.5 * (V + V.T)
    return ClusteredCov(matrix=V, n_clusters=G, correction=factor, names=dm.columns)

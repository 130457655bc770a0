"""Candidate grids, objective profiles, cutoff selection and profile sets.

Both objectives are maximised: the grouped binomial-logit log-likelihood, or
the negated weighted residual sum of squares of the linear-probability
model. Selection is an argmax over valid candidates with ties going to the
smallest cutoff, applied after every candidate has been evaluated.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import IO

import numpy as np
import scipy.linalg as sla
from scipy import stats

from .design import BaseDesign, ModelSpec
from .errors import (
    AllCandidatesInvalid,
    EstimationError,
    InvalidConfig,
    NoValidCandidates,
    RankDeficientBeyondRepair,
)
from .estimators import binomial_logit_fit, wls_fit
from .panel import PanelDataset, nearest_rank

OBJECTIVES = ("binomial-loglik", "weighted-rss")
#: RSS below this fraction of the weighted sum of squares is rounding noise
RSS_NOISE_FLOOR = 1e-14


@dataclass(frozen=True)
class SearchConfig:
    p_lo: float = 5.0
    p_hi: float = 95.0
    grid_kind: str = "distinct"  # or "percentile"
    p_step: float = 1.0
    min_side: int = 80
    search_period_max: int | None = None
    objective: str = "binomial-loglik"

    def __post_init__(self):
        if not (0 <= self.p_lo < self.p_hi <= 100):
            raise InvalidConfig("need 0 <= p_lo < p_hi <= 100", field="search.p_lo")
        if self.min_side < 1:
            raise InvalidConfig("min_side must be >= 1", field="search.min_side")
        if self.grid_kind not in ("distinct", "percentile"):
            raise InvalidConfig(f"unknown grid kind {self.grid_kind!r}", field="search.grid_kind")
        if self.grid_kind == "percentile" and self.p_step < 1:
            raise InvalidConfig("percentile step must be >= 1", field="search.p_step")
        if self.objective not in OBJECTIVES:
            raise InvalidConfig(f"objective must be one of {OBJECTIVES}", field="search.objective")


@dataclass(frozen=True)
class CandidateGrid:
    candidates: np.ndarray
    n_below: np.ndarray
    n_above: np.ndarray
    grid_kind: str
    window: tuple[float, float]
    n_search: int

    def __len__(self) -> int:
        return int(self.candidates.size)


def search_sample(ds: PanelDataset, cfg: SearchConfig) -> PanelDataset:
    if cfg.search_period_max is None:
        return ds
    keep = ds.period <= cfg.search_period_max
    if not keep.any():
        raise NoValidCandidates(f"no rows with period <= {cfg.search_period_max}")
    return ds.take(keep)


def grid_from_scale(S, cfg: SearchConfig) -> CandidateGrid:
    """Candidate grid from a vector of scales (the search sample)."""
    S = np.sort(np.asarray(S, dtype=np.float64))
    if S.size == 0:
        raise NoValidCandidates("empty search sample")
    q_lo = float(nearest_rank(S, cfg.p_lo, presorted=True))
    q_hi = float(nearest_rank(S, cfg.p_hi, presorted=True))
    if cfg.grid_kind == "distinct":
        u = np.unique(S)
        cand = u[(u >= q_lo) & (u <= q_hi)]
    else:
        ps = []
        p = cfg.p_lo
        k = 0
        while p <= cfg.p_hi + 1e-12:
            ps.append(p)
            k += 1
            p = cfg.p_lo + k * cfg.p_step
        cand = np.unique([nearest_rank(S, q, presorted=True) for q in ps]).astype(np.float64)
    below = np.searchsorted(S, cand, side="right")
    above = S.size - below
    ok = (below >= cfg.min_side) & (above >= cfg.min_side)
    if not ok.any():
        raise NoValidCandidates(
            f"no candidate in [{q_lo}, {q_hi}] has {cfg.min_side} rows on both sides (N={S.size})"
        )
    return CandidateGrid(cand[ok], below[ok], above[ok], cfg.grid_kind, (q_lo, q_hi), int(S.size))


def build_grid(ds: PanelDataset, cfg: SearchConfig) -> CandidateGrid:
    """Distinct-value or percentile-step candidates inside the percentile window,
    keeping those with at least ``min_side`` search-sample rows at ``S <= c``
    and at ``S > c``.

    Raises
    ------
    NoValidCandidates
    """
    return grid_from_scale(search_sample(ds, cfg).scale, cfg)


@dataclass(frozen=True, eq=False)
class SearchProfile:
    candidates: np.ndarray
    objective: np.ndarray
    valid: np.ndarray
    n_below: np.ndarray
    n_above: np.ndarray
    kind: str
    n_obs: int
    iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    notes: tuple[str, ...] = ()

    @property
    def best_index(self) -> int:
        return select_index(self)

    def lr(self) -> np.ndarray:
        """LR(c) against the best candidate; NaN on invalid candidates.

        For the likelihood objective ``2 (l_max - l(c))``. For the RSS
        objective the Gaussian profile likelihood gives ``N ln(RSS(c)/RSS_min)``.
        """
        out = np.full(self.candidates.size, np.nan)
        v = self.valid
        if not v.any():
            return out
        best = np.max(self.objective[v])
        if self.kind == "binomial-loglik":
            out[v] = 2.0 * (best - self.objective[v])
        else:
            rss = -self.objective[v]
            rss_min = -best
            if rss_min <= 0:
                out[v] = np.where(rss <= rss_min, 0.0, np.inf)
            else:
                out[v] = self.n_obs * np.log(rss / rss_min)
        return out


@dataclass(frozen=True)
class CutoffEstimate:
    c_hat: float
    ln_c_hat: float
    objective_at_best: float
    profile_set: tuple[float, ...]
    profile_interval: tuple[float, float]
    lr_critical: float
    alpha: float

    def covers(self, c: float, grid: np.ndarray | None = None) -> bool:
        """Set membership when ``c`` is a grid point, hull containment otherwise."""
        if grid is not None and np.any(grid == c):
            return bool(c in self.profile_set)
        return bool(self.profile_interval[0] <= c <= self.profile_interval[1])


# -- objective evaluation ------------------------------------------------------


def _objective_spec(spec: ModelSpec, cfg: SearchConfig) -> ModelSpec:
    if cfg.objective == "binomial-loglik" or spec.outcome == "oai_rate":
        return spec.replace(outcome="oai_rate", weights="auto")
    return spec


def evaluate_objective(ds: PanelDataset, spec: ModelSpec, c: float, cfg: SearchConfig) -> tuple[float, bool]:
    """Objective at one cutoff, fitted from scratch on the search sample.

    Nothing is raised: separation, non-convergence or collinear terms give
    ``valid=False``.
    """
    sample = search_sample(ds, cfg)
    spec = _objective_spec(spec, cfg)
    try:
        base = BaseDesign(sample, spec)
        dm = base.with_terms(c)
        if cfg.objective == "binomial-loglik":
            fit = binomial_logit_fit(dm, sample.successes, sample.inspections, on_separation="flag")
            return fit.loglik, bool(fit.usable and np.isfinite(fit.loglik))
        fit = wls_fit(dm)
        return -fit.rss, bool(np.isfinite(fit.rss))
    except EstimationError:
        return float("nan"), False


def _map(fn, items, n_jobs: int):
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def _loglik_profile(sample: PanelDataset, spec: ModelSpec, grid: CandidateGrid, n_jobs: int):
    base = BaseDesign(sample, spec)
    s = sample.successes[base.row_index].astype(float)
    n = sample.inspections[base.row_index].astype(float)
    base_dm = base.without_terms()
    try:
        base_fit = binomial_logit_fit(base_dm, s, n, on_separation="flag")
        b0 = base_fit.coefficients
    except EstimationError:
        b0 = None
    at = base.dense_names.index("x") + 1 if "x" in base.dense_names else 1

    def one(c):
        try:
            dm = base.with_terms(float(c))
        except RankDeficientBeyondRepair:
            return float("nan"), False, 0
        start = None if b0 is None else np.insert(b0, at, [0.0, 0.0])
        try:
            fit = binomial_logit_fit(dm, s, n, start=start, on_separation="flag")
        except EstimationError:
            return float("nan"), False, 0
        return fit.loglik, bool(fit.usable and np.isfinite(fit.loglik)), fit.iterations

    res = _map(one, grid.candidates, n_jobs)
    return res, base.row_index.size


def _rss_profile(sample: PanelDataset, spec: ModelSpec, grid: CandidateGrid, n_jobs: int):
    """Frisch-Waugh scan: RSS(c) = RSS_base - r' P (P'P)^-1 P' r with P the
    base-residualised weighted piecewise columns."""
    base = BaseDesign(sample, spec)
    dm0 = base.without_terms()
    sw = np.sqrt(dm0.weights)
    Qw, Rw = sla.qr(dm0.X * sw[:, None], mode="economic")
    ys = sw * dm0.response
    r = ys - Qw @ (Qw.T @ ys)
    rss_base = float(r @ r)
    floor = RSS_NOISE_FLOOR * float(ys @ ys)
    if rss_base <= floor:
        # response in the span of the base design (e.g. constant): RSS is 0 at every c
        r = np.zeros_like(r)
        rss_base = 0.0

    def one(c):
        terms = base.terms_at(float(c))
        if not base.check_terms(terms.post, terms.after):
            return float("nan"), False, 0
        P = np.column_stack([terms.post, terms.after]) * sw[:, None]
        P = P - Qw @ (Qw.T @ P)
        g = P.T @ r
        A = P.T @ P
        try:
            expl = float(g @ sla.solve(A, g, assume_a="pos"))
        except (np.linalg.LinAlgError, sla.LinAlgWarning):
            return float("nan"), False, 0
        rss = rss_base - expl
        if rss <= floor:
            rss = 0.0
        return -rss, True, 0

    res = _map(one, grid.candidates, n_jobs)
    return res, base.row_index.size


def profile_objective(ds: PanelDataset, spec: ModelSpec, cfg: SearchConfig,
                      grid: CandidateGrid | None = None, *, n_jobs: int = 1) -> SearchProfile:
    """Evaluate the objective at every grid candidate on the search sample.

    Candidates are independent (logit fits start from the no-break fit with
    zero piecewise coefficients), so the profile does not depend on
    evaluation order or ``n_jobs``.
    """
    sample = search_sample(ds, cfg)
    if grid is None:
        grid = grid_from_scale(sample.scale, cfg)
    spec = _objective_spec(spec, cfg)
    if cfg.objective == "binomial-loglik":
        res, n_obs = _loglik_profile(sample, spec, grid, n_jobs)
    else:
        res, n_obs = _rss_profile(sample, spec, grid, n_jobs)
    obj = np.array([r[0] for r in res], dtype=float)
    valid = np.array([r[1] for r in res], dtype=bool)
    its = np.array([r[2] for r in res], dtype=int)
    return SearchProfile(
        candidates=grid.candidates, objective=obj, valid=valid,
        n_below=grid.n_below, n_above=grid.n_above, kind=cfg.objective,
        n_obs=int(n_obs), iterations=its,
    )


# -- selection and profile sets ---------------------------------------------


def select_index(profile: SearchProfile) -> int:
    v = np.flatnonzero(profile.valid & np.isfinite(profile.objective))
    if v.size == 0:
        raise AllCandidatesInvalid("no valid candidate in the profile")
    obj = profile.objective[v]
    best = obj.max()
    tied = v[obj == best]
    return int(tied[np.argmin(profile.candidates[tied])])


def chi2_quantile(prob: float, df: int = 1) -> float:
    """Chi-square quantile. Uses the upper-tail inverse (``chi2.isf``) so that
    small tail probabilities keep full relative precision."""
    if not 0 < prob < 1:
        raise ValueError("prob must lie in (0, 1)")
    return float(stats.chi2.isf(1.0 - prob, df))


def profile_confidence_set(profile: SearchProfile, alpha: float = 0.05) -> tuple[tuple[float, ...], tuple[float, float]]:
    """Valid candidates with ``LR(c) <= chi2_{1, 1-alpha}``, and their (min, max) hull."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    select_index(profile)  # raises AllCandidatesInvalid
    crit = chi2_quantile(1.0 - alpha, 1)
    lr = profile.lr()
    members = profile.candidates[profile.valid & (lr <= crit)]
    members = tuple(float(c) for c in members)
    return members, (min(members), max(members))


def select_cutoff(profile: SearchProfile, alpha: float = 0.05) -> CutoffEstimate:
    """Argmax over valid candidates, ties to the smallest cutoff.

    Raises
    ------
    AllCandidatesInvalid
    """
    i = select_index(profile)
    c = float(profile.candidates[i])
    members, hull = profile_confidence_set(profile, alpha)
    return CutoffEstimate(
        c_hat=c, ln_c_hat=math.log(c), objective_at_best=float(profile.objective[i]),
        profile_set=members, profile_interval=hull,
        lr_critical=chi2_quantile(1.0 - alpha, 1), alpha=alpha,
    )


def search_cutoff(ds: PanelDataset, spec: ModelSpec, cfg: SearchConfig, *, alpha: float = 0.05,
                  grid: CandidateGrid | None = None, n_jobs: int = 1) -> tuple[CutoffEstimate, SearchProfile]:
    """Grid, profile and selection in one call."""
    profile = profile_objective(ds, spec, cfg, grid, n_jobs=n_jobs)
    return select_cutoff(profile, alpha), profile


def with_objective(cfg: SearchConfig, objective: str) -> SearchConfig:
    return replace(cfg, objective=objective)


def write_profile(profile: SearchProfile, dest: IO[str], alpha: float = 0.05, fmt=repr) -> None:
    """Profile table: c, ln c, objective, valid, side counts, LR and set membership."""
    lr = profile.lr()
    crit = chi2_quantile(1.0 - alpha, 1)
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["c", "ln_c", "objective", "valid", "n_below", "n_above", "lr", "in_profile_set"])
    for i, c in enumerate(profile.candidates):
        in_set = bool(profile.valid[i] and lr[i] <= crit)
        w.writerow([fmt(float(c)), fmt(math.log(c)), fmt(float(profile.objective[i])), int(profile.valid[i]),
                    int(profile.n_below[i]), int(profile.n_above[i]), fmt(float(lr[i])), int(in_set)])

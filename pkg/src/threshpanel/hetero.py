"""Group and density-bin cutoff searches, cutoff percentile positions,
placebo checks on predetermined controls, and binned RD-plot data.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import IO

import numpy as np

from .design import BaseDesign, FixedEffectSpec, ModelSpec, running_from_scale
from .effects import PiecewiseEffects, estimate_effects
from .errors import (
    InsufficientDistinctValues,
    NoValidCandidates,
    ThreshPanelError,
    TooFewRowsPerBin,
)
from .estimators import wls_fit
from .panel import PanelDataset, nearest_rank
from .search import CutoffEstimate, SearchConfig, SearchProfile, search_cutoff, search_sample

BIN_NAMES = {1: "low", 2: "medium", 3: "high"}


# -- density terciles --------------------------------------------------------


def _group_labels(ds: PanelDataset, group_key: str | None) -> np.ndarray:
    if group_key is None or (group_key == "group_id" and ds.group_id is None):
        return np.full(len(ds), "", dtype=object)
    return ds.labels(group_key)


def tercile_bins(values) -> np.ndarray:
    """Bins 1/2/3 for one group: cut at the nearest-rank 100/3 and 200/3 percentiles,
    values equal to a threshold going to the lower bin.

    Raises
    ------
    InsufficientDistinctValues
        Fewer than three distinct values.
    """
    v = np.asarray(values, dtype=np.float64)
    if np.unique(v).size < 3:
        raise InsufficientDistinctValues(f"{np.unique(v).size} distinct value(s); terciles need 3")
    s = np.sort(v)
    q33 = nearest_rank(s, Fraction(100, 3), presorted=True)
    q66 = nearest_rank(s, Fraction(200, 3), presorted=True)
    return np.where(v <= q33, 1, np.where(v <= q66, 2, 3)).astype(np.int64)


@dataclass(frozen=True)
class TercileAssignment:
    """Per-row bin (0 = not binned) and the groups that could not be binned."""

    bins: np.ndarray
    flagged: dict[str, str] = field(default_factory=dict)

    def labels(self) -> np.ndarray:
        return np.array([str(b) if b else "" for b in self.bins], dtype=object)


def density_terciles(ds: PanelDataset, density_var: str = "density", *,
                     group_key: str | None = "group_id", on_insufficient: str = "raise") -> TercileAssignment:
    """Within-group density terciles.

    Rows with a missing density get bin 0. A group with fewer than three
    distinct densities raises, or with ``on_insufficient="flag"`` is left
    unbinned and listed in ``flagged``.
    """
    D = ds.variable(density_var)
    groups = _group_labels(ds, group_key)
    bins = np.zeros(len(ds), dtype=np.int64)
    flagged: dict[str, str] = {}
    for g in sorted(set(groups.tolist())):
        rows = np.flatnonzero((groups == g) & np.isfinite(D))
        try:
            bins[rows] = tercile_bins(D[rows])
        except InsufficientDistinctValues as exc:
            if on_insufficient == "raise":
                raise InsufficientDistinctValues(f"group {g!r}: {exc}") from None
            flagged[g] = str(exc)
    return TercileAssignment(bins, flagged)


# -- cutoff percentiles ------------------------------------------------------


@dataclass(frozen=True)
class CutoffPercentile:
    pctl: float
    quartiles: tuple[float, float, float]
    n: int


def cutoff_percentile(stratum, c_star: float) -> CutoffPercentile:
    """``100 * #{S <= c*} / N`` and nearest-rank quartiles of S.

    ``stratum`` is a PanelDataset or an array of scales.
    """
    S = stratum.scale if isinstance(stratum, PanelDataset) else stratum
    S = np.sort(np.asarray(S, dtype=np.float64))
    if S.size == 0:
        raise ValueError("empty stratum")
    below = int(np.searchsorted(S, c_star, side="right"))
    q = tuple(float(nearest_rank(S, p, presorted=True)) for p in (25, 50, 75))
    return CutoffPercentile(pctl=100.0 * below / S.size, quartiles=q, n=int(S.size))


# -- group and group x bin searches -----------------------------------------


@dataclass(frozen=True)
class GroupBinResult:
    group_id: str
    bin: int | None
    N: int
    N_search: int
    c_star: float = math.nan
    ln_c_star: float = math.nan
    estimate: CutoffEstimate | None = None
    effects: dict[str, PiecewiseEffects] = field(default_factory=dict)
    percentile: CutoffPercentile | None = None
    skipped_reason: str | None = None
    notes: tuple[str, ...] = ()

    @property
    def skipped(self) -> bool:
        return self.skipped_reason is not None


def _run_stratum(ds: PanelDataset, spec: ModelSpec, cfg: SearchConfig, outcomes, alpha: float,
                 group: str, b: int | None) -> GroupBinResult:
    N = len(ds)
    try:
        n_search = len(search_sample(ds, cfg))
    except NoValidCandidates:
        n_search = 0
    try:
        est, _ = search_cutoff(ds, spec, cfg, alpha=alpha)
    except ThreshPanelError as exc:
        return GroupBinResult(group, b, N, n_search, skipped_reason=f"{type(exc).__name__}: {exc}")
    effects: dict[str, PiecewiseEffects] = {}
    notes = []
    for outcome in outcomes:
        try:
            effects[outcome] = estimate_effects(ds, spec.replace(outcome=outcome, weights="auto"), est.c_hat)
        except ThreshPanelError as exc:
            notes.append(f"{outcome}: {type(exc).__name__}: {exc}")
    pct = cutoff_percentile(search_sample(ds, cfg), est.c_hat)
    return GroupBinResult(group, b, N, n_search, est.c_hat, est.ln_c_hat, est, effects, pct, None, tuple(notes))


def group_bin_search(ds: PanelDataset, spec: ModelSpec, cfg: SearchConfig, *, by: str = "group",
                     group_key: str | None = "group_id", density_var: str = "density",
                     outcomes: tuple[str, ...] = ("oai_rate", "effort"), alpha: float = 0.05,
                     n_jobs: int = 1) -> list[GroupBinResult]:
    """Search and effects separately per group (``by="group"``) or per
    group and density tercile (``by="group_bin"``), with the pooled FE and
    controls.

    A stratum whose search fails (typically ``NoValidCandidates`` from the
    side-support rule) is returned with ``skipped_reason`` set. Results are
    sorted by (group, bin).
    """
    if by not in ("group", "group_bin"):
        raise ValueError("by must be 'group' or 'group_bin'")
    groups = _group_labels(ds, group_key)
    strata: list[tuple[str, int | None, np.ndarray]] = []
    flagged: dict[str, str] = {}
    if by == "group_bin":
        ta = density_terciles(ds, density_var, group_key=group_key, on_insufficient="flag")
        flagged = ta.flagged
    for g in sorted(set(groups.tolist())):
        in_g = groups == g
        if by == "group":
            strata.append((g, None, in_g))
        elif g not in flagged:
            for b in (1, 2, 3):
                strata.append((g, b, in_g & (ta.bins == b)))

    def one(item):
        g, b, mask = item
        if not mask.any():
            return GroupBinResult(g, b, 0, 0, skipped_reason="empty stratum")
        return _run_stratum(ds.take(mask), spec, cfg, outcomes, alpha, g, b)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            out = list(ex.map(one, strata))
    else:
        out = [one(s) for s in strata]
    for g, reason in flagged.items():
        for b in (1, 2, 3):
            out.append(GroupBinResult(g, b, int(np.sum(groups == g)), 0,
                                      skipped_reason=f"InsufficientDistinctValues: {reason}"))
    out.sort(key=lambda r: (r.group_id, r.bin or 0))
    return out


# -- placebo checks ----------------------------------------------------------


def _placebo_spec(control: str, fe: FixedEffectSpec, weighted: bool, running: str, cluster_key: str) -> ModelSpec:
    return ModelSpec(outcome=control, running=running, weights="inspections" if weighted else "none",
                     controls=(), fe=fe, cluster_key=cluster_key)


def placebo_at_cutoff(ds: PanelDataset, control_name: str, c_star: float, fe: FixedEffectSpec | None = None, *,
                      weighted: bool = False, running: str = "log", cluster_key: str = "unit_id",
                      correction: str = "cr1") -> PiecewiseEffects:
    """Piecewise regression of a predetermined control on x, post, after and FE
    at a fixed cutoff. Unweighted unless ``weighted`` (then by inspections);
    the controls block is left out because the control is the outcome.
    """
    fe = FixedEffectSpec() if fe is None else fe
    spec = _placebo_spec(control_name, fe, weighted, running, cluster_key)
    return estimate_effects(ds, spec, c_star, correction=correction)


@dataclass(frozen=True)
class PlaceboScan:
    control: str
    profile: SearchProfile
    estimate: CutoffEstimate
    relative_range: float
    hull_share: float
    flat: bool
    flatness_tol: float
    hull_coverage: float


def placebo_scan(ds: PanelDataset, control_name: str, cfg: SearchConfig, fe: FixedEffectSpec | None = None, *,
                 flatness_tol: float = 1e-3, hull_coverage: float = 0.8, weighted: bool = False,
                 running: str = "log", cluster_key: str = "unit_id", alpha: float = 0.05) -> PlaceboScan:
    """RSS profile with the control as outcome, and a flatness verdict.

    The verdict is flat when ``(max - min) / |max|`` of the objective is
    below ``flatness_tol`` and the profile-set hull spans at least
    ``hull_coverage`` of the grid candidates. A profile that is exactly
    constant has relative range 0.
    """
    fe = FixedEffectSpec() if fe is None else fe
    spec = _placebo_spec(control_name, fe, weighted, running, cluster_key)
    est, prof = search_cutoff(ds, spec, replace(cfg, objective="weighted-rss"), alpha=alpha)
    obj = prof.objective[prof.valid]
    top, bottom = float(obj.max()), float(obj.min())
    spread = top - bottom
    if spread == 0.0:
        rel = 0.0
    elif top == 0.0:
        rel = math.inf
    else:
        rel = spread / abs(top)
    lo, hi = est.profile_interval
    share = float(np.mean((prof.candidates >= lo) & (prof.candidates <= hi)))
    return PlaceboScan(control_name, prof, est, rel, share,
                       bool(rel < flatness_tol and share >= hull_coverage), flatness_tol, hull_coverage)


# -- RD plot data ------------------------------------------------------------


@dataclass(frozen=True)
class RDBin:
    side: str  # "below" (S <= c*) or "above"
    x_center: float
    x_lo: float
    x_hi: float
    mean_residual: float
    count: int
    weight: float


@dataclass(frozen=True)
class RDPlotData:
    outcome: str
    c_star: float
    threshold_x: float
    bins: tuple[RDBin, ...]
    line_x: np.ndarray
    line_y: np.ndarray
    line_coefficients: dict[str, float]


def rd_plot_data(ds: PanelDataset, spec: ModelSpec, c_star: float, n_bins: int = 20, *,
                 line_points: int = 25) -> RDPlotData:
    """Binned residual means around the cutoff plus a fitted piecewise line.

    The outcome is residualised (with the model weights) on intercept,
    controls and fixed effects; neither x nor the piecewise terms enter.
    ``n_bins`` is the total number of bins, ``n_bins // 2`` below the cutoff
    and the rest above; bins are equal-count in x within each side and
    never cross the cutoff. Bin means are weighted.

    Raises
    ------
    TooFewRowsPerBin
        A side averages fewer than two rows per bin.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    base = BaseDesign(ds, spec, include_running=False)
    dm = base.without_terms()
    resid = wls_fit(dm).residuals
    w = dm.weights
    S = base.S
    x = running_from_scale(S, spec.running).values
    thr = math.log(c_star) if spec.running == "log" else float(c_star)
    below = S <= c_star
    k_lo = n_bins // 2
    sides = (("below", np.flatnonzero(below), k_lo), ("above", np.flatnonzero(~below), n_bins - k_lo))
    bins: list[RDBin] = []
    for side, idx, k in sides:
        if idx.size < 2 * k:
            raise TooFewRowsPerBin(f"{idx.size} rows {side} the cutoff for {k} bins (need >= 2 per bin)")
        order = idx[np.argsort(x[idx], kind="stable")]
        for part in np.array_split(order, k):
            ww = w[part]
            bins.append(RDBin(side, float(np.average(x[part], weights=ww)), float(x[part].min()),
                              float(x[part].max()), float(np.average(resid[part], weights=ww)),
                              int(part.size), float(ww.sum())))

    # piecewise line fitted to the residualised outcome
    post = (S > c_star).astype(float)
    after = post * (x - thr)
    X = np.column_stack([np.ones_like(x), x, post, after])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], resid * sw, rcond=None)
    lx_lo = np.linspace(x.min(), min(thr, x.max()), line_points)
    lx_hi = np.linspace(max(thr, x.min()), x.max(), line_points)
    lx = np.concatenate([lx_lo, lx_hi])
    lpost = np.concatenate([np.zeros(line_points), np.ones(line_points)])
    ly = coef[0] + coef[1] * lx + lpost * (coef[2] + coef[3] * (lx - thr))
    return RDPlotData(spec.outcome, float(c_star), thr, tuple(bins), lx, ly,
                      dict(zip(("intercept", "x", "post", "after"), map(float, coef))))


# -- table writers -----------------------------------------------------------


def _eff_cells(e: PiecewiseEffects | None, fmt) -> list:
    if e is None:
        return ["", "", "", ""]
    return [fmt(e.jump.estimate), fmt(e.jump.p), fmt(e.kink.estimate), fmt(e.kink.p)]


def write_group_table(results: list[GroupBinResult], dest: IO[str],
                      outcomes: tuple[str, ...] = ("oai_rate", "effort"), fmt=repr) -> None:
    """Group or group x bin table: N, N_search, c*, ln c*, then jump (p) and
    kink (p) per outcome, and the skip reason."""
    w = csv.writer(dest, lineterminator="\n")
    head = ["group", "bin", "N", "N_search", "c_star", "ln_c_star"]
    for o in outcomes:
        head += [f"{o}_jump", f"{o}_jump_p", f"{o}_kink", f"{o}_kink_p"]
    w.writerow(head + ["skipped_reason"])
    for r in results:
        row = [r.group_id, "" if r.bin is None else r.bin, r.N, r.N_search,
               "" if r.skipped else fmt(r.c_star), "" if r.skipped else fmt(r.ln_c_star)]
        for o in outcomes:
            row += _eff_cells(r.effects.get(o), fmt)
        w.writerow(row + [r.skipped_reason or ""])


def write_percentile_table(results: list[GroupBinResult], dest: IO[str], fmt=repr) -> None:
    """Where each selected cutoff falls in its stratum's search-sample scale distribution."""
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["group", "bin", "N_search", "c_star", "ln_c_star", "pctl", "Q25", "Q50", "Q75"])
    for r in results:
        if r.skipped or r.percentile is None:
            continue
        q = r.percentile.quartiles
        w.writerow([r.group_id, "" if r.bin is None else r.bin, r.N_search, fmt(r.c_star), fmt(r.ln_c_star),
                    fmt(r.percentile.pctl), fmt(q[0]), fmt(q[1]), fmt(q[2])])


def write_placebo_table(effects: dict[str, PiecewiseEffects], dest: IO[str],
                        scans: dict[str, PlaceboScan] | None = None, fmt=repr) -> None:
    w = csv.writer(dest, lineterminator="\n")
    head = ["control", "N", "c_star", "jump", "jump_se", "jump_p", "kink", "kink_se", "kink_p"]
    if scans:
        head += ["scan_relative_range", "scan_hull_share", "scan_flat"]
    w.writerow(head)
    for name, e in effects.items():
        row = [name, e.n_rows, fmt(e.c_used), fmt(e.jump.estimate), fmt(e.jump.se), fmt(e.jump.p),
               fmt(e.kink.estimate), fmt(e.kink.se), fmt(e.kink.p)]
        if scans:
            s = scans.get(name)
            row += ["", "", ""] if s is None else [fmt(s.relative_range), fmt(s.hull_share), int(s.flat)]
        w.writerow(row)


def write_rd_plot(data: RDPlotData, bins_dest: IO[str], line_dest: IO[str], fmt=repr) -> None:
    w = csv.writer(bins_dest, lineterminator="\n")
    w.writerow(["side", "x_center", "x_lo", "x_hi", "mean_residual", "count", "weight"])
    for b in data.bins:
        w.writerow([b.side, fmt(b.x_center), fmt(b.x_lo), fmt(b.x_hi), fmt(b.mean_residual), b.count, fmt(b.weight)])
    w = csv.writer(line_dest, lineterminator="\n")
    w.writerow(["x", "fitted", "post"])
    half = data.line_x.size // 2
    for i, (xv, yv) in enumerate(zip(data.line_x, data.line_y)):
        w.writerow([fmt(float(xv)), fmt(float(yv)), int(i >= half)])

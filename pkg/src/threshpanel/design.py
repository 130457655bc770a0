"""Running variable, piecewise cutoff terms and design-matrix construction.

Fixed effects are encoded as explicit dummy columns (one reference level
dropped per factor) so that the same design serves the weighted least
squares and the binomial-logit paths. Collinear columns are pruned by a
greedy Gram-Schmidt pass over unit-normalised columns in priority order:
intercept, running variable, controls, fixed-effect blocks, then the two
piecewise terms. Losing a piecewise term is an error.
"""

from __future__ import annotations

import csv
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO

import numpy as np

from . import _fallback
from .errors import (
    InvalidConfig,
    NonPositiveScale,
    RankDeficientBeyondRepair,
    UnknownFactorLabel,
    UnknownVariable,
)
from .panel import PanelDataset

PRUNE_TOL = 1e-9

OUTCOME_WEIGHTS = {"oai_rate": "inspections", "effort": "establishments", "oai_per_est": "establishments"}


# -- running variable and piecewise terms ------------------------------------


@dataclass(frozen=True)
class RunningVariable:
    kind: str  # "log" or "level"
    values: np.ndarray


def running_from_scale(S: np.ndarray, kind: str = "log") -> RunningVariable:
    S = np.asarray(S, dtype=np.float64)
    if kind == "log":
        if np.any(S <= 0):
            raise NonPositiveScale(f"log running variable needs S > 0; min S = {S.min()}")
        return RunningVariable("log", np.log(S))
    if kind == "level":
        return RunningVariable("level", S.copy())
    raise InvalidConfig(f"running kind must be 'log' or 'level', not {kind!r}", field="model.running")


def make_running(ds: PanelDataset, kind: str = "log") -> RunningVariable:
    """``x = ln S`` (log kind) or ``x = S`` (level kind)."""
    return running_from_scale(ds.scale, kind)


@dataclass(frozen=True)
class PiecewiseTerms:
    post: np.ndarray
    after: np.ndarray
    cutoff: float
    kind: str = "log"


def piecewise_terms(S, x: RunningVariable, c: float) -> PiecewiseTerms:
    """``post = 1{S > c}``; ``after = post * (x - ln c)`` (log) or ``post * (S - c)`` (level)."""
    S = np.asarray(S, dtype=np.float64)
    if not c > 0:
        raise ValueError(f"cutoff must be positive, got {c}")
    if S.size and not (S.min() <= c <= S.max()):
        warnings.warn(f"cutoff {c} outside observed scale range [{S.min()}, {S.max()}]", stacklevel=2)
    post = (S > c).astype(np.float64)
    if x.kind == "log":
        after = post * (x.values - np.log(c))
    else:
        after = post * (S - c)
    return PiecewiseTerms(post=post, after=after, cutoff=float(c), kind=x.kind)


# -- model setup -----------------------------------------------------


@dataclass(frozen=True)
class FixedEffectSpec:
    """Categorical factors and label-specific linear trends.

    ``factors`` entries name a label column (``"state"``), the built-in
    ``"period"``, or an interaction such as ``"region*period"``. ``trends``
    holds ``(factor, time)`` pairs; the time variable is centred at the
    sample midpoint. ``reference`` overrides the dropped level (default: the
    first observed level in sorted order). ``levels`` optionally declares the full
    level set of a factor, which may include levels absent from the data.
    """

    factors: tuple[str, ...] = ("period", "state")
    trends: tuple[tuple[str, str], ...] = ()
    reference: Mapping[str, str] = field(default_factory=dict)
    levels: Mapping[str, Sequence[str]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "trends", tuple(tuple(t) for t in self.trends))


@dataclass(frozen=True)
class ModelSpec:
    """Outcome, weights, running variable, controls, fixed effects and cluster key.

    ``weights="auto"`` picks inspections for the OAI rate, establishments for
    effort and OAI per establishment, and no weights otherwise.
    """

    outcome: str = "oai_rate"
    running: str = "log"
    weights: str = "auto"
    controls: tuple[str, ...] = ()
    fe: FixedEffectSpec = field(default_factory=FixedEffectSpec)
    cluster_key: str = "unit_id"

    def __post_init__(self):
        object.__setattr__(self, "controls", tuple(self.controls))
        if self.weights not in ("auto", "inspections", "establishments", "none"):
            raise InvalidConfig(f"unknown weight rule {self.weights!r}", field="model.weights")
        if self.running not in ("log", "level"):
            raise InvalidConfig(f"unknown running kind {self.running!r}", field="model.running")
        required = {"oai_rate": "inspections", "effort": "establishments"}.get(self.outcome)
        if required and self.weights not in ("auto", required):
            raise InvalidConfig(
                f"outcome {self.outcome} requires {required} weights, got {self.weights}",
                field="model.weights",
            )

    @property
    def weight_rule(self) -> str:
        if self.weights != "auto":
            return self.weights
        return OUTCOME_WEIGHTS.get(self.outcome, "none")

    def replace(self, **kw) -> ModelSpec:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return ModelSpec(**d)


def outcome_values(ds: PanelDataset, spec: ModelSpec) -> np.ndarray:
    return ds.variable(spec.outcome)


def weight_values(ds: PanelDataset, spec: ModelSpec) -> np.ndarray:
    rule = spec.weight_rule
    if rule == "inspections":
        return ds.inspections.astype(np.float64)
    if rule == "establishments":
        return ds.scale.astype(np.float64)
    return np.ones(len(ds))


# -- design matrices ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DesignStructure:
    """Dense block plus one-nonzero-per-row blocks (see ``_core``)."""

    dense: np.ndarray  # N x d, C-contiguous
    codes: np.ndarray  # nb x N intp, -1 = no column
    vals: np.ndarray  # nb x N
    offsets: np.ndarray  # nb intp
    K: int

    @cached_property
    def X(self) -> np.ndarray:
        X = _fallback.materialize(self.dense, self.codes, self.vals, self.offsets, self.K)
        X.setflags(write=False)
        return X


@dataclass(frozen=True)
class _Block:
    name: str  # factor or "trend:factor"
    levels: tuple[str, ...]  # column labels in order
    codes: np.ndarray  # per row index into levels, -1 = none
    vals: np.ndarray

    def column(self, j: int) -> np.ndarray:
        return np.where(self.codes == j, self.vals, 0.0)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """An estimable design.

    ``X`` column order: intercept, x, post, after, controls, then the
    fixed-effect blocks, minus any pruned columns (listed in
    ``dropped_columns``). ``row_index`` maps design rows to dataset rows.
    """

    columns: tuple[str, ...]
    structure: DesignStructure
    response: np.ndarray
    weights: np.ndarray
    cluster_ids: np.ndarray
    cluster_codes: np.ndarray
    n_clusters: int
    dropped_columns: tuple[str, ...]
    row_index: np.ndarray
    n_excluded: int = 0
    cutoff: float | None = None

    @property
    def X(self) -> np.ndarray:
        return self.structure.X

    @property
    def n_rows(self) -> int:
        return int(self.response.size)

    @property
    def n_cols(self) -> int:
        return len(self.columns)

    def index(self, name: str) -> int:
        return self.columns.index(name)

    def with_response(self, y: np.ndarray, weights: np.ndarray | None = None) -> DesignMatrix:
        y = np.asarray(y, dtype=np.float64)
        w = self.weights if weights is None else np.asarray(weights, dtype=np.float64)
        return DesignMatrix(
            columns=self.columns, structure=self.structure, response=y, weights=w,
            cluster_ids=self.cluster_ids, cluster_codes=self.cluster_codes,
            n_clusters=self.n_clusters, dropped_columns=self.dropped_columns,
            row_index=self.row_index, n_excluded=self.n_excluded, cutoff=self.cutoff,
        )

    def condition_number(self) -> float:
        """2-norm condition number of X with unit-normalised columns."""
        X = self.X
        norms = np.linalg.norm(X, axis=0)
        s = np.linalg.svd(X / norms, compute_uv=False)
        return float(s[0] / s[-1])


def _factor_labels(ds: PanelDataset, factor: str) -> np.ndarray:
    parts = factor.split("*")
    try:
        cols = [ds.labels(p.strip()) for p in parts]
    except UnknownVariable as exc:
        raise UnknownFactorLabel(f"fixed-effect factor {factor!r}: {exc}") from None
    if len(cols) == 1:
        return cols[0]
    return np.array(["|".join(t) for t in zip(*cols)], dtype=object)


def _time_values(ds: PanelDataset, name: str) -> np.ndarray:
    if name == "period":
        return ds.period.astype(np.float64)
    return ds.variable(name)


def _greedy_basis(columns: list[np.ndarray], tol: float = PRUNE_TOL, Q: np.ndarray | None = None):
    """Greedy modified Gram-Schmidt over unit-normalised columns.

    Returns (keep flags, orthonormal basis of kept columns, residual norms).
    Columns are scaled to unit norm first, so the leading diagonal of the
    implied triangular factor is 1 and a column is dropped when its residual
    norm is at most ``tol``. ``Q`` seeds the basis with already-kept columns.
    """
    n = columns[0].size if columns else (0 if Q is None else Q.shape[0])
    k0 = 0 if Q is None else Q.shape[1]
    Qm = np.empty((n, k0 + len(columns)))
    if k0:
        Qm[:, :k0] = Q
    k = k0
    keep, diags = [], []
    for col in columns:
        nrm = np.linalg.norm(col)
        if nrm == 0.0 or not np.isfinite(nrm):
            keep.append(False)
            diags.append(0.0)
            continue
        v = col / nrm
        if k:
            B = Qm[:, :k]
            v = v - B @ (B.T @ v)
            v = v - B @ (B.T @ v)
        r = float(np.linalg.norm(v))
        diags.append(r)
        if r <= tol:
            keep.append(False)
            continue
        keep.append(True)
        Qm[:, k] = v / r
        k += 1
    return keep, Qm[:, :k].copy(), diags


class BaseDesign:
    """Everything in the design except the piecewise terms, pruned once.

    ``with_terms`` then appends the cutoff-specific ``post`` / ``after``
    columns, checking them against the retained basis. Grid searches build
    one BaseDesign and call ``with_terms`` per candidate.
    """

    def __init__(self, ds: PanelDataset, spec: ModelSpec, *, include_running: bool = True,
                 response: np.ndarray | None = None, weights: np.ndarray | None = None):
        self.spec = spec
        self.ds = ds
        self.include_running = include_running
        y_all = outcome_values(ds, spec) if response is None else np.asarray(response, dtype=np.float64)
        w_all = weight_values(ds, spec) if weights is None else np.asarray(weights, dtype=np.float64)
        for name in spec.controls:
            if name not in ds.controls:
                raise UnknownVariable(f"control {name!r} not in dataset")
        ok = np.isfinite(y_all) & np.isfinite(w_all) & (w_all > 0)
        ctrl_all = [ds.variable(name) for name in spec.controls]
        for v in ctrl_all:
            ok &= np.isfinite(v)
        rows = np.flatnonzero(ok)
        if rows.size == 0:
            raise RankDeficientBeyondRepair("no rows with positive weight and finite values")
        self.row_index = rows
        self.n_excluded = int(len(ds) - rows.size)
        self.S = ds.scale[rows].astype(np.float64)
        self.running = running_from_scale(self.S, spec.running) if include_running else None
        self.response = y_all[rows]
        self.weights = w_all[rows]

        try:
            cl_labels = ds.labels(spec.cluster_key)[rows]
        except UnknownVariable:
            raise UnknownFactorLabel(f"cluster key {spec.cluster_key!r} not in dataset") from None
        uniq, codes = np.unique(cl_labels.astype(str), return_inverse=True)
        self.cluster_ids = cl_labels
        self.cluster_codes = codes.astype(np.intp)
        self.n_clusters = int(uniq.size)

        n = rows.size
        dense_names = ["intercept"]
        dense_cols = [np.ones(n)]
        if include_running:
            dense_names.append("x")
            dense_cols.append(self.running.values)
        for name, v in zip(spec.controls, ctrl_all):
            dense_names.append(name)
            dense_cols.append(v[rows])

        blocks: list[_Block] = []
        for factor in spec.fe.factors:
            labels = _factor_labels(ds, factor)[rows]
            if np.any(labels == ""):
                raise UnknownFactorLabel(f"factor {factor!r} has missing labels")
            levels = sorted(set(labels.tolist()) | set(map(str, spec.fe.levels.get(factor, ()))))
            ref = spec.fe.reference.get(factor, min(labels.tolist()) if labels.size else levels[0])
            if ref not in levels:
                raise UnknownFactorLabel(f"reference level {ref!r} not a level of {factor!r}")
            kept = [lv for lv in levels if lv != ref]
            pos = {lv: j for j, lv in enumerate(kept)}
            codes_f = np.array([pos.get(lb, -1) for lb in labels], dtype=np.intp)
            blocks.append(_Block(factor, tuple(kept), codes_f, np.ones(n)))
        for factor, tname in spec.fe.trends:
            labels = _factor_labels(ds, factor)[rows]
            levels = sorted(set(labels.tolist()))
            pos = {lv: j for j, lv in enumerate(levels)}
            t = _time_values(ds, tname)[rows]
            tc = t - 0.5 * (t.min() + t.max())
            codes_f = np.array([pos[lb] for lb in labels], dtype=np.intp)
            blocks.append(_Block(f"trend:{factor}*{tname}", tuple(levels), codes_f, tc))

        # pruning in priority order; dense columns first, then blocks
        cand = list(zip(dense_names, dense_cols))
        for b in blocks:
            for j, lv in enumerate(b.levels):
                cand.append((self._block_col_name(b, lv), b.column(j)))
        keep, Q, _ = _greedy_basis([c for _, c in cand])
        self.basis = Q
        self.dropped = tuple(name for (name, _), k in zip(cand, keep) if not k)

        nd = len(dense_names)
        self.dense_names = [nm for nm, k in zip(dense_names, keep[:nd]) if k]
        self._dense = [c for c, k in zip(dense_cols, keep[:nd]) if k]
        self.blocks: list[_Block] = []
        pos_in_cand = nd
        for b in blocks:
            flags = keep[pos_in_cand:pos_in_cand + len(b.levels)]
            pos_in_cand += len(b.levels)
            new_idx = np.full(len(b.levels), -1, dtype=np.intp)
            kept_levels = []
            for j, f in enumerate(flags):
                if f:
                    new_idx[j] = len(kept_levels)
                    kept_levels.append(b.levels[j])
            if not kept_levels:
                continue
            codes_b = np.where(b.codes >= 0, new_idx[np.maximum(b.codes, 0)], -1).astype(np.intp)
            self.blocks.append(_Block(b.name, tuple(kept_levels), codes_b, b.vals))

        if include_running and "x" not in self.dense_names:
            warnings.warn("running variable pruned as collinear (constant scale?)", stacklevel=2)

    @staticmethod
    def _block_col_name(b: _Block, level: str) -> str:
        if b.name.startswith("trend:"):
            return f"{b.name}={level}"
        return f"fe:{b.name}={level}"

    def _assemble(self, dense_names, dense_cols, cutoff) -> DesignMatrix:
        n = self.row_index.size
        D = np.ascontiguousarray(np.column_stack(dense_cols)) if dense_cols else np.empty((n, 0))
        nb = len(self.blocks)
        codes = np.ascontiguousarray(np.vstack([b.codes for b in self.blocks]) if nb else np.empty((0, n), dtype=np.intp), dtype=np.intp)
        vals = np.ascontiguousarray(np.vstack([b.vals for b in self.blocks]) if nb else np.empty((0, n)))
        offsets = []
        K = D.shape[1]
        names = list(dense_names)
        for b in self.blocks:
            offsets.append(K)
            K += len(b.levels)
            names += [self._block_col_name(b, lv) for lv in b.levels]
        st = DesignStructure(D, codes, vals, np.asarray(offsets, dtype=np.intp), K)
        for a in (D, codes, vals):
            a.setflags(write=False)
        return DesignMatrix(
            columns=tuple(names), structure=st, response=self.response, weights=self.weights,
            cluster_ids=self.cluster_ids, cluster_codes=self.cluster_codes,
            n_clusters=self.n_clusters, dropped_columns=self.dropped,
            row_index=self.row_index, n_excluded=self.n_excluded, cutoff=cutoff,
        )

    def without_terms(self) -> DesignMatrix:
        return self._assemble(self.dense_names, self._dense, None)

    def terms_at(self, c: float) -> PiecewiseTerms:
        if self.running is None:
            raise ValueError("design built without a running variable")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return piecewise_terms(self.S, self.running, c)

    def check_terms(self, post: np.ndarray, after: np.ndarray) -> bool:
        """True when post and after are linearly independent of the base (and of each other)."""
        Q = self.basis
        prev = None
        for col in (post, after):
            nrm = np.linalg.norm(col)
            if nrm == 0.0 or not np.isfinite(nrm):
                return False
            v = col / nrm
            for _ in range(2):
                v = v - Q @ (Q.T @ v)
                if prev is not None:
                    v = v - prev * (prev @ v)
            r = np.linalg.norm(v)
            if r <= PRUNE_TOL:
                return False
            prev = v / r
        return True

    def with_terms(self, terms: PiecewiseTerms | float, *, rows_are_design_rows: bool = False) -> DesignMatrix:
        """Full design at a cutoff. ``terms`` may be a cutoff value or dataset-row terms."""
        if not isinstance(terms, PiecewiseTerms):
            terms = self.terms_at(float(terms))
            rows_are_design_rows = True
        post, after = terms.post, terms.after
        if not rows_are_design_rows and post.size != self.row_index.size:
            post, after = post[self.row_index], after[self.row_index]
        if not self.check_terms(post, after):
            raise RankDeficientBeyondRepair(
                f"piecewise terms at cutoff {terms.cutoff} are collinear with the design"
            )
        names = list(self.dense_names)
        cols = list(self._dense)
        at = names.index("x") + 1 if "x" in names else 1
        names[at:at] = ["post", "after"]
        cols[at:at] = [post, after]
        return self._assemble(names, cols, terms.cutoff)


def build_design(ds: PanelDataset, spec: ModelSpec, terms: PiecewiseTerms) -> DesignMatrix:
    """Design for ``spec`` at the cutoff carried by ``terms``.

    ``terms`` are per dataset row (as returned by :func:`piecewise_terms` on
    ``ds.scale``). Rows with non-positive weight or non-finite outcome or
    controls are excluded and counted in ``n_excluded``.

    Raises
    ------
    RankDeficientBeyondRepair
        A piecewise term is collinear with the remaining columns.
    UnknownFactorLabel
        A fixed-effect factor or the cluster key cannot be resolved.
    """
    return BaseDesign(ds, spec).with_terms(terms)


def write_design(dm: DesignMatrix, dest: IO[str]) -> None:
    """Debug dump: one row per observation with response, weight, cluster and X."""
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["row", "response", "weight", "cluster", *dm.columns])
    X = dm.X
    for i in range(dm.n_rows):
        w.writerow([int(dm.row_index[i]), repr(float(dm.response[i])), repr(float(dm.weights[i])),
                    dm.cluster_ids[i], *(repr(float(v)) for v in X[i])])

"""County-year (or group-county-year) panel: ingest, validation, filtering,
summary statistics and re-emission.

The dataset is stored column-wise as read-only numpy arrays. Rows are kept
sorted by ``(unit_id, period, group_id)`` so that every downstream
computation sees the same order regardless of how the input was arranged.
"""

from __future__ import annotations

import csv
import io
import math
import os
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from fractions import Fraction
from typing import IO, Any

import numpy as np

from .errors import (
    DuplicateKey,
    EmptySample,
    InvalidConfig,
    MissingColumn,
    ParseError,
    UnknownVariable,
)

DERIVED_VARIABLES = ("oai_rate", "effort", "oai_per_est", "ln_scale", "insp_per_est")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def nearest_rank(values: np.ndarray, p: float | Fraction, *, presorted: bool = False) -> float:
    """Nearest-rank percentile: the order statistic at rank ``ceil(p/100 * N)``.

    ``p`` is in percent. The rank is computed in exact rational arithmetic so
    that, e.g., ``p=7`` with ``N=100`` gives rank 7 rather than 8.
    """
    v = np.asarray(values)
    if v.size == 0:
        raise ValueError("nearest_rank of an empty array")
    if not presorted:
        v = np.sort(v)
    frac = p if isinstance(p, Fraction) else Fraction(repr(float(p)))
    if frac < 0 or frac > 100:
        raise ValueError(f"percentile {p} outside [0, 100]")
    rank = math.ceil(frac * v.size / 100)
    rank = min(max(rank, 1), v.size)
    return v[rank - 1]


@dataclass(frozen=True)
class ColumnMapping:
    """Maps panel roles onto header names of the source table."""

    unit_id: str = "unit_id"
    period: str = "period"
    scale: str = "scale"
    inspections: str = "inspections"
    successes: str = "successes"
    group_id: str | None = None
    facilities: str | None = None
    density: str | None = None
    controls: Mapping[str, str] = field(default_factory=dict)
    fe_labels: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ColumnMapping:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown mapping keys {sorted(unknown)}", field="input.columns")
        kw = dict(d)
        for key in ("controls", "fe_labels"):
            v = kw.get(key, {})
            if isinstance(v, (list, tuple)):
                v = {name: name for name in v}
            kw[key] = dict(v)
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "unit_id": self.unit_id,
            "period": self.period,
            "scale": self.scale,
            "inspections": self.inspections,
            "successes": self.successes,
            "group_id": self.group_id,
            "facilities": self.facilities,
            "density": self.density,
            "controls": dict(self.controls),
            "fe_labels": dict(self.fe_labels),
        }

    def headers(self) -> list[str]:
        """Source headers in canonical emit order."""
        out = [self.unit_id, self.period]
        if self.group_id:
            out.append(self.group_id)
        out += [self.scale, self.inspections, self.successes]
        if self.facilities:
            out.append(self.facilities)
        if self.density:
            out.append(self.density)
        out += list(self.controls.values())
        out += list(self.fe_labels.values())
        return out


@dataclass(frozen=True)
class PanelRow:
    unit_id: str
    period: int
    group_id: str | None
    scale: int
    inspections: int
    successes: int
    facilities: int | None
    controls: dict[str, float]
    fe_labels: dict[str, str]
    density: float | None


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Validated rectangular panel.

    Use :meth:`from_arrays` to build one; it validates invariants and applies
    the canonical row order. Missing controls and densities are ``NaN``;
    missing fixed-effect labels are empty strings.
    """

    unit_id: np.ndarray
    period: np.ndarray
    group_id: np.ndarray | None
    scale: np.ndarray
    inspections: np.ndarray
    successes: np.ndarray
    facilities: np.ndarray | None
    controls: Mapping[str, np.ndarray]
    fe_labels: Mapping[str, np.ndarray]
    density: np.ndarray | None
    schema: ColumnMapping
    provenance: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_arrays(
        cls,
        *,
        unit_id: Iterable,
        period: Iterable,
        scale: Iterable,
        inspections: Iterable,
        successes: Iterable,
        group_id: Iterable | None = None,
        facilities: Iterable | None = None,
        controls: Mapping[str, Iterable] | None = None,
        fe_labels: Mapping[str, Iterable] | None = None,
        density: Iterable | None = None,
        schema: ColumnMapping | None = None,
        provenance: Mapping[str, Any] | None = None,
    ) -> PanelDataset:
        unit = np.array([str(u) for u in unit_id], dtype=object)
        n = unit.size
        per = np.asarray(list(period) if not isinstance(period, np.ndarray) else period, dtype=np.int64)
        grp = None if group_id is None else np.array([str(g) for g in group_id], dtype=object)
        S = np.asarray(scale, dtype=np.int64)
        ins = np.asarray(inspections, dtype=np.int64)
        suc = np.asarray(successes, dtype=np.int64)
        fac = None if facilities is None else np.asarray(facilities, dtype=np.int64)
        ctrl = {k: np.asarray(v, dtype=np.float64) for k, v in (controls or {}).items()}
        fel = {k: np.array(["" if x is None else str(x) for x in v], dtype=object)
               for k, v in (fe_labels or {}).items()}
        dens = None if density is None else np.asarray(density, dtype=np.float64)

        for name, a in [("period", per), ("scale", S), ("inspections", ins), ("successes", suc)]:
            if a.shape != (n,):
                raise ValueError(f"column {name} has length {a.shape}, expected {n}")
        for name, a in [("group_id", grp), ("facilities", fac), ("density", dens), *ctrl.items(), *fel.items()]:
            if a is not None and a.shape != (n,):
                raise ValueError(f"column {name} has length {a.shape}, expected {n}")

        diags: list[tuple[int, str]] = []
        for i in np.flatnonzero(S < 0):
            diags.append((int(i), f"scale={S[i]} is negative"))
        for i in np.flatnonzero(ins < 0):
            diags.append((int(i), f"inspections={ins[i]} is negative"))
        for i in np.flatnonzero(suc < 0):
            diags.append((int(i), f"successes={suc[i]} is negative"))
        for i in np.flatnonzero(suc > ins):
            diags.append((int(i), f"successes={suc[i]} > inspections={ins[i]} violates successes <= inspections"))
        if fac is not None:
            for i in np.flatnonzero(fac < 0):
                diags.append((int(i), f"facilities={fac[i]} is negative"))
        if diags:
            raise ParseError("invalid panel rows", sorted(diags))

        gkey = grp if grp is not None else np.full(n, "", dtype=object)
        order = sorted(range(n), key=lambda i: (unit[i], per[i], gkey[i]))
        order = np.asarray(order, dtype=np.intp)
        if n > 1:
            k0 = list(zip(unit[order], per[order], gkey[order]))
            dups = [order[i] for i in range(1, n) if k0[i] == k0[i - 1]]
            if dups:
                i = int(dups[0])
                raise DuplicateKey(
                    f"duplicate key (unit={unit[i]}, period={per[i]}, group={gkey[i] or None}) "
                    f"at row {i}; {len(dups)} duplicate(s) in total"
                )

        if schema is None:
            schema = ColumnMapping(
                group_id="group_id" if grp is not None else None,
                facilities="facilities" if fac is not None else None,
                density="density" if dens is not None else None,
                controls={k: k for k in ctrl},
                fe_labels={k: k for k in fel},
            )
        take = lambda a: None if a is None else _readonly(a[order])  # noqa: E731
        return cls(
            unit_id=take(unit),
            period=take(per),
            group_id=take(grp),
            scale=take(S),
            inspections=take(ins),
            successes=take(suc),
            facilities=take(fac),
            controls={k: take(v) for k, v in ctrl.items()},
            fe_labels={k: take(v) for k, v in fel.items()},
            density=take(dens),
            schema=schema,
            provenance=dict(provenance or {}),
        )

    # -- basic access --------------------------------------------------------

    def __len__(self) -> int:
        return int(self.unit_id.size)

    @property
    def n_rows(self) -> int:
        return len(self)

    @property
    def control_names(self) -> list[str]:
        return list(self.controls)

    def rows(self) -> Iterator[PanelRow]:
        for i in range(len(self)):
            yield PanelRow(
                unit_id=self.unit_id[i],
                period=int(self.period[i]),
                group_id=None if self.group_id is None else self.group_id[i],
                scale=int(self.scale[i]),
                inspections=int(self.inspections[i]),
                successes=int(self.successes[i]),
                facilities=None if self.facilities is None else int(self.facilities[i]),
                controls={k: float(v[i]) for k, v in self.controls.items()},
                fe_labels={k: v[i] for k, v in self.fe_labels.items()},
                density=None if self.density is None else float(self.density[i]),
            )

    def take(self, mask_or_index: np.ndarray, **provenance: Any) -> PanelDataset:
        """Row subset preserving order. Accepts a boolean mask or sorted indices."""
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = np.sort(idx)
        sub = lambda a: None if a is None else _readonly(a[idx])  # noqa: E731
        prov = dict(self.provenance)
        prov.update(provenance)
        return PanelDataset(
            unit_id=sub(self.unit_id),
            period=sub(self.period),
            group_id=sub(self.group_id),
            scale=sub(self.scale),
            inspections=sub(self.inspections),
            successes=sub(self.successes),
            facilities=sub(self.facilities),
            controls={k: sub(v) for k, v in self.controls.items()},
            fe_labels={k: sub(v) for k, v in self.fe_labels.items()},
            density=sub(self.density),
            schema=self.schema,
            provenance=prov,
        )

    def with_labels(self, **labels: np.ndarray) -> PanelDataset:
        """Copy with extra (or replaced) categorical label columns."""
        fel = dict(self.fe_labels)
        for k, v in labels.items():
            v = np.array([str(x) for x in v], dtype=object)
            if v.shape != (len(self),):
                raise ValueError(f"label column {k} has wrong length")
            fel[k] = _readonly(v)
        return PanelDataset(
            unit_id=self.unit_id, period=self.period, group_id=self.group_id,
            scale=self.scale, inspections=self.inspections, successes=self.successes,
            facilities=self.facilities, controls=self.controls, fe_labels=fel,
            density=self.density, schema=self.schema, provenance=dict(self.provenance),
        )

    def variable(self, name: str) -> np.ndarray:
        """Return a stored or derived variable as float64."""
        with np.errstate(divide="ignore", invalid="ignore"):
            if name == "oai_rate":
                return self.successes / self.inspections
            if name == "effort":
                return np.log(self.inspections.astype(float)) - np.log(self.scale.astype(float))
            if name == "insp_per_est":
                return self.inspections / self.scale
            if name == "oai_per_est":
                return self.successes / self.scale
            if name == "ln_scale":
                return np.log(self.scale.astype(float))
        if name in ("scale", "inspections", "successes", "period"):
            return getattr(self, name).astype(np.float64)
        if name == "facilities" and self.facilities is not None:
            return self.facilities.astype(np.float64)
        if name == "density" and self.density is not None:
            return np.asarray(self.density, dtype=np.float64)
        if name in self.controls:
            return np.asarray(self.controls[name], dtype=np.float64)
        raise UnknownVariable(f"unknown variable {name!r}")

    def labels(self, name: str) -> np.ndarray:
        """Categorical labels for a factor name; ``period`` and ``unit_id`` are built in."""
        if name == "period":
            return np.array([str(p) for p in self.period], dtype=object)
        if name == "unit_id":
            return self.unit_id
        if name == "group_id" and self.group_id is not None:
            return self.group_id
        if name in self.fe_labels:
            return self.fe_labels[name]
        raise UnknownVariable(f"unknown factor {name!r}")

    def same_rows(self, other: PanelDataset, rtol: float = 0.0) -> bool:
        """Row-level equality: exact on keys and counts, ``rtol`` on reals."""
        if len(self) != len(other):
            return False
        exact = [
            (self.unit_id, other.unit_id), (self.period, other.period),
            (self.scale, other.scale), (self.inspections, other.inspections),
            (self.successes, other.successes),
        ]
        for a, b in exact:
            if not np.array_equal(a, b):
                return False
        for a, b in [(self.group_id, other.group_id), (self.facilities, other.facilities)]:
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        if set(self.controls) != set(other.controls) or set(self.fe_labels) != set(other.fe_labels):
            return False
        for k in self.fe_labels:
            if not np.array_equal(self.fe_labels[k], other.fe_labels[k]):
                return False
        reals = [(self.controls[k], other.controls[k]) for k in self.controls]
        if (self.density is None) != (other.density is None):
            return False
        if self.density is not None:
            reals.append((self.density, other.density))
        for a, b in reals:
            if not np.allclose(a, b, rtol=rtol, atol=0.0, equal_nan=True):
                return False
        return True


# -- ingest / emit -----------------------------------------------------------


def _parse_int(text: str) -> int:
    t = text.strip()
    try:
        return int(t)
    except ValueError:
        f = float(t)
        if not math.isfinite(f) or f != int(f):
            raise ValueError(f"{text!r} is not an integer count") from None
        return int(f)


def _parse_float(text: str) -> float:
    t = text.strip()
    if t == "" or t.upper() in ("NA", "NAN"):
        return math.nan
    return float(t)


def ingest_panel(
    source: str | os.PathLike | IO[str],
    mapping: ColumnMapping | Mapping[str, Any],
    *,
    on_error: str = "raise",
) -> PanelDataset:
    """Read a comma-delimited table with a header row into a PanelDataset.

    Parameters
    ----------
    source : path or text file handle
    mapping : ColumnMapping or dict
        Role -> header mapping. Every named header must exist.
    on_error : {"raise", "skip"}
        ``"raise"`` collects every row diagnostic and raises ParseError;
        ``"skip"`` drops offending rows and records the diagnostics in
        ``provenance["rejected"]``.

    Raises
    ------
    MissingColumn, DuplicateKey, ParseError
    """
    if not isinstance(mapping, ColumnMapping):
        mapping = ColumnMapping.from_dict(mapping)
    if on_error not in ("raise", "skip"):
        raise ValueError("on_error must be 'raise' or 'skip'")

    if isinstance(source, (str, os.PathLike)):
        path = os.fspath(source)
        with open(path, newline="", encoding="utf-8") as fh:
            return _ingest(fh, mapping, on_error, path)
    return _ingest(source, mapping, on_error, getattr(source, "name", "<stream>"))


def _ingest(fh: IO[str], mapping: ColumnMapping, on_error: str, path: str) -> PanelDataset:
    reader = csv.DictReader(fh)
    header = reader.fieldnames or []
    missing = [h for h in mapping.headers() if h not in header]
    if missing:
        raise MissingColumn(f"mapping names absent header(s) {missing}; available: {header}")

    cols: dict[str, list] = {k: [] for k in ("unit", "period", "group", "S", "ins", "suc", "fac", "dens")}
    ctrl: dict[str, list] = {k: [] for k in mapping.controls}
    fel: dict[str, list] = {k: [] for k in mapping.fe_labels}
    diags: list[tuple[int, str]] = []

    for i, rec in enumerate(reader):
        try:
            unit = rec[mapping.unit_id].strip()
            if not unit:
                raise ValueError(f"empty {mapping.unit_id}")
            per = _parse_int(rec[mapping.period])
            S = _parse_int(rec[mapping.scale])
            ins = _parse_int(rec[mapping.inspections])
            suc = _parse_int(rec[mapping.successes])
            if S < 0 or ins < 0 or suc < 0:
                raise ValueError("negative count")
            if suc > ins:
                raise ValueError(f"successes={suc} > inspections={ins} violates successes <= inspections")
            fac = _parse_int(rec[mapping.facilities]) if mapping.facilities else None
            if fac is not None and fac < 0:
                raise ValueError("negative facilities count")
            dens = _parse_float(rec[mapping.density]) if mapping.density else None
            cvals = {k: _parse_float(rec[h]) for k, h in mapping.controls.items()}
            lvals = {k: (rec[h] or "").strip() for k, h in mapping.fe_labels.items()}
            grp = (rec[mapping.group_id] or "").strip() if mapping.group_id else None
        except (ValueError, TypeError) as exc:
            diags.append((i, str(exc)))
            continue
        cols["unit"].append(unit)
        cols["period"].append(per)
        cols["group"].append(grp)
        cols["S"].append(S)
        cols["ins"].append(ins)
        cols["suc"].append(suc)
        cols["fac"].append(fac)
        cols["dens"].append(dens)
        for k, v in cvals.items():
            ctrl[k].append(v)
        for k, v in lvals.items():
            fel[k].append(v)

    if diags and on_error == "raise":
        raise ParseError(f"{len(diags)} row(s) of {path} could not be parsed", diags)

    return PanelDataset.from_arrays(
        unit_id=cols["unit"],
        period=np.asarray(cols["period"], dtype=np.int64),
        group_id=cols["group"] if mapping.group_id else None,
        scale=np.asarray(cols["S"], dtype=np.int64),
        inspections=np.asarray(cols["ins"], dtype=np.int64),
        successes=np.asarray(cols["suc"], dtype=np.int64),
        facilities=np.asarray(cols["fac"], dtype=np.int64) if mapping.facilities else None,
        controls={k: np.asarray(v, dtype=np.float64) for k, v in ctrl.items()},
        fe_labels=fel,
        density=np.asarray(cols["dens"], dtype=np.float64) if mapping.density else None,
        schema=mapping,
        provenance={"source": path, "on_error": on_error, "rejected": diags},
    )


def _fmt_real(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_panel(ds: PanelDataset, dest: str | os.PathLike | IO[str]) -> None:
    """Emit the dataset using its schema's headers (re-ingestable with the same mapping)."""
    m = ds.schema
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            write_panel(ds, fh)
        return
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(m.headers())
    for i in range(len(ds)):
        row = [ds.unit_id[i], str(int(ds.period[i]))]
        if m.group_id:
            row.append(ds.group_id[i])
        row += [str(int(ds.scale[i])), str(int(ds.inspections[i])), str(int(ds.successes[i]))]
        if m.facilities:
            row.append(str(int(ds.facilities[i])))
        if m.density:
            row.append(_fmt_real(ds.density[i]))
        row += [_fmt_real(ds.controls[k][i]) for k in m.controls]
        row += [ds.fe_labels[k][i] for k in m.fe_labels]
        w.writerow(row)


def panel_to_csv_text(ds: PanelDataset) -> str:
    buf = io.StringIO()
    write_panel(ds, buf)
    return buf.getvalue()


# -- filtering ---------------------------------------------------------------


@dataclass(frozen=True)
class SampleFilter:
    year_min: int | None = None
    year_max: int | None = None
    min_scale: int = 1
    min_inspections: int = 1
    require_controls: bool = True

    def __post_init__(self):
        if self.year_min is not None and self.year_max is not None and self.year_min > self.year_max:
            raise InvalidConfig("year_min > year_max", field="filter.year_min")
        if self.min_scale < 0 or self.min_inspections < 0:
            raise InvalidConfig("thresholds must be >= 0", field="filter")


def apply_sample_filters(ds: PanelDataset, f: SampleFilter) -> PanelDataset:
    """Listwise sample restriction.

    Each dropped row is attributed to the first failing reason, in the order
    period window, scale, inspections, missing controls, missing FE label.
    The per-reason counts are stored in ``provenance["filter_report"]``.

    Raises
    ------
    EmptySample
        No rows survive.
    """
    n = len(ds)
    keep = np.ones(n, dtype=bool)
    report: list[tuple[str, int]] = []

    def drop(reason: str, bad: np.ndarray) -> None:
        nonlocal keep
        hit = keep & bad
        report.append((reason, int(hit.sum())))
        keep &= ~bad

    lo = f.year_min if f.year_min is not None else np.iinfo(np.int64).min
    hi = f.year_max if f.year_max is not None else np.iinfo(np.int64).max
    drop("period_window", (ds.period < lo) | (ds.period > hi))
    drop("min_scale", ds.scale < max(1, f.min_scale))
    drop("min_inspections", ds.inspections < max(1, f.min_inspections))
    if f.require_controls and ds.controls:
        miss = np.zeros(n, dtype=bool)
        for v in ds.controls.values():
            miss |= np.isnan(v)
        drop("missing_controls", miss)
    else:
        report.append(("missing_controls", 0))
    if ds.fe_labels:
        miss = np.zeros(n, dtype=bool)
        for v in ds.fe_labels.values():
            miss |= v == ""
        drop("missing_fe_label", miss)
    else:
        report.append(("missing_fe_label", 0))

    if not keep.any():
        raise EmptySample(f"no rows survive the sample filter ({dict(report)})")
    return ds.take(keep, filter_report=report, sample_filter=f)


def write_drop_report(ds: PanelDataset, dest: IO[str]) -> None:
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["reason", "count"])
    for reason, count in ds.provenance.get("filter_report", []):
        w.writerow([reason, count])


# -- summary statistics ------------------------------------------------------


@dataclass(frozen=True)
class VariableSummary:
    N: int
    mean: float
    sd: float
    p25: float
    p50: float
    p75: float
    min: float
    max: float


@dataclass(frozen=True)
class SummaryStats:
    variables: dict[str, VariableSummary]

    def __getitem__(self, name: str) -> VariableSummary:
        return self.variables[name]

    def table(self) -> list[list[Any]]:
        out = []
        for name, s in self.variables.items():
            out.append([name, s.N, s.mean, s.sd, s.p25, s.p50, s.p75, s.min, s.max])
        return out


def summarize(ds: PanelDataset, vars: Iterable[str]) -> SummaryStats:
    """Summary statistics with nearest-rank percentiles and an N-1 SD.

    Missing values (NaN) are excluded; ``N`` counts the values used.
    """
    out: dict[str, VariableSummary] = {}
    for name in vars:
        v = ds.variable(name)
        v = np.sort(v[~np.isnan(v)])
        n = v.size
        if n == 0:
            raise UnknownVariable(f"variable {name!r} has no non-missing values")
        # math.fsum keeps the mean exact to the last ulp irrespective of row order
        mean = math.fsum(v) / n
        sd = math.sqrt(math.fsum((v - mean) ** 2) / (n - 1)) if n > 1 else math.nan
        out[name] = VariableSummary(
            N=n,
            mean=mean,
            sd=sd,
            p25=float(nearest_rank(v, 25, presorted=True)),
            p50=float(nearest_rank(v, 50, presorted=True)),
            p75=float(nearest_rank(v, 75, presorted=True)),
            min=float(v[0]),
            max=float(v[-1]),
        )
    return SummaryStats(out)

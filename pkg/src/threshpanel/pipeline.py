"""Config-driven batch runs: ingest, filter, search, effects, heterogeneity,
placebo checks, RD-plot data, synthetic data and Monte Carlo.

Each table is written twice: ``name.csv`` with reals at 6 significant
digits and ``name_full.csv`` at full precision. ``manifest.json`` records
the config digest, per-stage row counts and the SHA-256 of every emitted
file. Table bytes depend only on the canonical config (seed included) and
the input data.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from . import __version__, _kernels
from .config import RunConfig
from .effects import estimate_effects, write_effects_table
from .errors import ConfigError, ThreshPanelError
from .hetero import (
    group_bin_search,
    placebo_at_cutoff,
    placebo_scan,
    rd_plot_data,
    write_group_table,
    write_percentile_table,
    write_placebo_table,
    write_rd_plot,
)
from .panel import (
    PanelDataset,
    apply_sample_filters,
    ingest_panel,
    summarize,
    write_drop_report,
    write_panel,
)
from .search import search_cutoff, search_sample, write_profile
from .synth import MCPipeline, generate_grouped, generate_synthetic, run_monte_carlo, write_records, write_summary

COMMANDS = {
    "ingest": ("ingest",),
    "search": ("ingest", "search"),
    "effects": ("ingest", "search", "effects"),
    "hetero": ("ingest", "hetero"),
    "placebo": ("ingest", "search", "placebo"),
    "rdplot": ("ingest", "search", "rdplot"),
    "synth": ("synth",),
    "mc": ("mc",),
    "all": ("ingest", "search", "effects", "hetero", "placebo", "rdplot"),
}

# stages that "all" runs only when their config block is enabled
OPTIONAL_IN_ALL = {"hetero", "placebo", "rdplot"}


def fmt6(v) -> str:
    """Real at 6 significant digits."""
    return format(float(v), ".6g")


def fmt_full(v) -> str:
    """Shortest round-trip representation."""
    return repr(float(v))


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_digest: str
    tool_version: str
    started: str
    finished: str = ""
    status: str = "running"
    stages: list[str] = field(default_factory=list)
    row_counts: dict[str, Any] = field(default_factory=dict)
    files: list[dict[str, Any]] = field(default_factory=list)
    error: str = ""

    def digests(self) -> dict[str, str]:
        return {f["name"]: f["sha256"] for f in self.files}


class _Run:
    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.manifest = RunManifest(
            command=command, config_digest=cfg.digest(), tool_version=__version__,
            started=_now(),
        )
        self.ds: PanelDataset | None = None
        self.c_star: float | None = None
        self.search_estimate = None

    # -- output --------------------------------------------------------------

    def _write_bytes(self, name: str, data: bytes) -> None:
        path = self.out / name
        path.write_bytes(data)
        self.manifest.files.append({"name": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})

    def emit(self, name: str, writer: Callable[[io.StringIO, Callable], None], *, companion: bool = True) -> None:
        """Write ``name.csv`` (6 significant digits) and ``name_full.csv``."""
        for suffix, fmt in ((("", fmt6), ("_full", fmt_full)) if companion else (("", fmt_full),)):
            buf = io.StringIO()
            writer(buf, fmt)
            self._write_bytes(f"{name}{suffix}.csv", buf.getvalue().encode("utf-8"))

    # -- stages --------------------------------------------------------------

    def stage_synth(self) -> None:
        ds = self._generate()
        self.emit("synthetic_panel", lambda b, f: write_panel(ds, b), companion=False)
        self.manifest.row_counts["synth"] = len(ds)

    def _generate(self) -> PanelDataset:
        cfg = self.cfg
        if cfg.synth_groups:
            groups = {g: replace(c, seed=_group_seed(cfg.seed, g)) for g, c in sorted(cfg.synth_groups.items())}
            return generate_grouped(groups)
        return generate_synthetic(cfg.synth_config())

    def stage_ingest(self) -> None:
        cfg = self.cfg
        if cfg.input is not None:
            _check_headers(cfg)
            raw = ingest_panel(cfg.input.path, cfg.input.columns, on_error=cfg.input.on_error)
            self.manifest.row_counts["input_sha256"] = sha256_file(cfg.input.path)
        else:
            raw = self._generate()
        ds = apply_sample_filters(raw, cfg.filter.sample_filter())
        self.ds = ds
        self.manifest.row_counts["ingested"] = len(raw)
        self.manifest.row_counts["rejected"] = len(raw.provenance.get("rejected", []))
        self.manifest.row_counts["retained"] = len(ds)
        self.emit("panel", lambda b, f: write_panel(ds, b), companion=False)
        self.emit("drop_report", lambda b, f: write_drop_report(ds, b), companion=False)
        names = ["oai_rate", "effort", "insp_per_est", "oai_per_est", "scale", "inspections", "successes"]
        if ds.facilities is not None:
            names.append("facilities")
        names += list(cfg.model.controls)
        stats = summarize(ds, names)
        self.emit("summary_stats", lambda b, f: _write_summary_stats(stats, b, f))

    def stage_search(self) -> None:
        cfg, ds = self.cfg, self.ds
        spec = cfg.model.spec("oai_rate")
        alpha = cfg.model.alpha
        variants = [("baseline", cfg.search.search_config())]
        if cfg.search.compare_objectives:
            alt = "weighted-rss" if cfg.search.objective == "binomial-loglik" else "binomial-loglik"
            other_grid = "percentile" if cfg.search.grid_kind == "distinct" else "distinct"
            variants.append((f"objective_{alt}", cfg.search.search_config(alt)))
            variants.append((f"grid_{other_grid}", replace(cfg.search.search_config(), grid_kind=other_grid)))
        rows = []
        for label, scfg in variants:
            est, prof = search_cutoff(ds, spec, scfg, alpha=alpha, n_jobs=cfg.search.n_jobs)
            if label == "baseline":
                self.search_estimate = est
                self.c_star = est.c_hat
                self.manifest.row_counts["search_sample"] = len(search_sample(ds, scfg))
                self.manifest.row_counts["search_fit_rows"] = prof.n_obs
                self.manifest.row_counts["grid"] = int(prof.candidates.size)
            self.emit(f"profile_{label}", lambda b, f, p=prof: write_profile(p, b, alpha, f))
            rows.append((label, scfg, est, prof))

        def write(b, f):
            w = csv.writer(b, lineterminator="\n")
            w.writerow(["variant", "grid_kind", "objective", "grid_size", "n_valid", "c_star", "ln_c_star",
                        "objective_at_best", "set_lo", "set_hi", "set_size", "lr_critical"])
            for label, scfg, est, prof in rows:
                w.writerow([label, scfg.grid_kind, scfg.objective, int(prof.candidates.size), int(prof.valid.sum()),
                            f(est.c_hat), f(est.ln_c_hat), f(est.objective_at_best), f(est.profile_interval[0]),
                            f(est.profile_interval[1]), len(est.profile_set), f(est.lr_critical)])

        self.emit("cutoff", write)

    def _cutoff_for(self, fixed: float | None) -> float:
        if fixed is not None:
            return float(fixed)
        if self.cfg.search.c_star is not None:
            return float(self.cfg.search.c_star)
        if self.c_star is None:
            raise ConfigError("no cutoff available: run the search stage or set search.c_star", field="search.c_star")
        return self.c_star

    def stage_effects(self) -> None:
        cfg, ds = self.cfg, self.ds
        c = self._cutoff_for(None)
        effects = [estimate_effects(ds, cfg.model.spec(o), c, correction=cfg.model.correction)
                   for o in cfg.model.outcomes]
        self.manifest.row_counts["effects"] = {e.outcome: e.n_rows for e in effects}
        self.emit("effects", lambda b, f: write_effects_table(effects, b, f))

    def stage_hetero(self) -> None:
        cfg, ds = self.cfg, self.ds
        h = cfg.hetero
        spec = cfg.model.spec("oai_rate")
        scfg = cfg.search.search_config()
        counts = {}
        bin_results = None
        if h.by_group:
            res = group_bin_search(ds, spec, scfg, by="group", group_key=h.group_key, outcomes=cfg.model.outcomes,
                                   alpha=cfg.model.alpha, n_jobs=h.n_jobs)
            counts["groups"] = len(res)
            self.emit("groups", lambda b, f, r=res: write_group_table(r, b, cfg.model.outcomes, f))
            bin_results = res
        if h.terciles:
            res = group_bin_search(ds, spec, scfg, by="group_bin", group_key=h.group_key,
                                   density_var=h.density_var, outcomes=cfg.model.outcomes,
                                   alpha=cfg.model.alpha, n_jobs=h.n_jobs)
            counts["group_bins"] = len(res)
            counts["group_bins_skipped"] = sum(r.skipped for r in res)
            self.emit("group_bins", lambda b, f, r=res: write_group_table(r, b, cfg.model.outcomes, f))
            bin_results = res
        if bin_results is not None:
            self.emit("cutoff_percentiles", lambda b, f, r=bin_results: write_percentile_table(r, b, f))
        self.manifest.row_counts["hetero"] = counts

    def stage_placebo(self) -> None:
        cfg, ds = self.cfg, self.ds
        p = cfg.placebo
        c = self._cutoff_for(p.c_star)
        names = p.controls or tuple(cfg.model.controls)
        fe = cfg.model.fe
        effects, scans = {}, {}
        for name in names:
            effects[name] = placebo_at_cutoff(ds, name, c, fe, weighted=p.weighted, running=cfg.model.running,
                                              cluster_key=cfg.model.cluster_key, correction=cfg.model.correction)
            if p.scan:
                scans[name] = placebo_scan(ds, name, cfg.search.search_config(), fe, flatness_tol=p.flatness_tol,
                                           hull_coverage=p.hull_coverage, weighted=p.weighted,
                                           running=cfg.model.running, cluster_key=cfg.model.cluster_key,
                                           alpha=cfg.model.alpha)
                self.emit(f"placebo_profile_{name}",
                          lambda b, f, s=scans[name]: write_profile(s.profile, b, cfg.model.alpha, f))
        self.manifest.row_counts["placebo"] = {k: e.n_rows for k, e in effects.items()}
        self.emit("placebo", lambda b, f: write_placebo_table(effects, b, scans or None, f))

    def stage_rdplot(self) -> None:
        cfg, ds = self.cfg, self.ds
        r = cfg.rdplot
        c = self._cutoff_for(r.c_star)
        counts = {}
        for outcome in r.outcomes:
            data = rd_plot_data(ds, cfg.model.spec(outcome), c, r.n_bins)
            counts[outcome] = sum(b.count for b in data.bins)
            self.emit(f"rdplot_{outcome}_bins", lambda b, f, d=data: write_rd_plot(d, b, io.StringIO(), f))
            self.emit(f"rdplot_{outcome}_line", lambda b, f, d=data: write_rd_plot(d, io.StringIO(), b, f))
        self.manifest.row_counts["rdplot"] = counts

    def stage_mc(self) -> None:
        cfg = self.cfg
        if cfg.mc is None or cfg.synth is None:
            raise ConfigError("the mc stage needs [synth] and [mc] blocks", field="mc")
        m = cfg.mc
        pipe = MCPipeline(
            spec=cfg.model.spec("oai_rate"), search_config=cfg.search.search_config(), search=m.search,
            compare_rss=m.compare_rss, outcomes=m.outcomes, placebo_controls=m.placebo_controls,
            placebo_scan=m.placebo_scan, placebo_weighted=cfg.placebo.weighted,
            flatness_tol=cfg.placebo.flatness_tol, hull_coverage=cfg.placebo.hull_coverage,
            alpha=cfg.model.alpha, recovery_tol=m.recovery_tol,
        )
        rep = run_monte_carlo(cfg.synth, pipe, m.n_reps, master_seed=cfg.seed, n_jobs=m.n_jobs)
        self.manifest.row_counts["mc"] = {"n_reps": rep.n_reps, "n_failed": rep.n_failed}
        self.emit("mc_records", lambda b, f: write_records(rep, b, f))
        self.emit("mc_summary", lambda b, f: write_summary(rep, b, f))
        self.mc_report = rep

    # -- driver --------------------------------------------------------------

    def stages_for(self, command: str) -> list[str]:
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}", field="command")
        stages = list(COMMANDS[command])
        if command == "all":
            flags = {"hetero": self.cfg.hetero.enabled, "placebo": self.cfg.placebo.enabled,
                     "rdplot": self.cfg.rdplot.enabled}
            stages = [s for s in stages if s not in OPTIONAL_IN_ALL or flags[s]]
        return stages

    def write_manifest(self) -> None:
        m = self.manifest
        doc = {
            "command": m.command, "status": m.status, "error": m.error,
            "tool_version": m.tool_version, "backend": _kernels.backend(),
            "config_digest": m.config_digest, "config": self.cfg.to_dict(),
            "config_path": self.cfg.source_path, "output_dir": str(self.out),
            "started": m.started, "finished": m.finished,
            "stages": m.stages, "row_counts": m.row_counts, "files": m.files,
        }
        (self.out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n",
                                                encoding="utf-8")


def run_pipeline(cfg: RunConfig, command: str = "all") -> RunManifest:
    """Run the stages of ``command`` and write tables plus ``manifest.json``.

    Raises
    ------
    ConfigError, DataError, EstimationError
        The failing stage name is attached as ``exc.stage``. A manifest with
        ``status = "failed"`` is still written when the output directory
        exists.
    """
    run = _Run(cfg, command)
    stages = run.stages_for(command)
    if "mc" in stages and cfg.mc is None:
        raise ConfigError("the mc command needs an [mc] block", field="mc")
    if "synth" in stages and cfg.synth is None:
        raise ConfigError("the synth command needs a [synth] block", field="synth")
    run.out.mkdir(parents=True, exist_ok=True)
    current = ""
    try:
        for current in stages:
            getattr(run, f"stage_{current}")()
            run.manifest.stages.append(current)
    except ThreshPanelError as exc:
        exc.stage = current
        run.manifest.status = "failed"
        run.manifest.error = f"{current}: {type(exc).__name__}: {exc}"
        run.manifest.finished = _now()
        run.write_manifest()
        raise
    run.manifest.status = "ok"
    run.manifest.finished = _now()
    run.write_manifest()
    return run.manifest


# -- helpers -----------------------------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return repr(o)
    if hasattr(o, "item"):
        return o.item()
    return str(o)


def _group_seed(seed: int, group: str) -> int:
    """Per-group seed for multi-group synthetic panels (stable across runs and platforms)."""
    h = hashlib.sha256(f"{seed}:{group}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def _check_headers(cfg: RunConfig) -> None:
    """Mapped columns must exist in the input header; report the config field."""
    path = cfg.input.path
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
    except OSError as exc:
        raise ConfigError(f"cannot open input: {exc}", field="input.path") from None
    present = set(h.strip() for h in header)
    m = cfg.input.columns
    for key in ("unit_id", "period", "scale", "inspections", "successes", "group_id", "facilities", "density"):
        col = getattr(m, key)
        if col is not None and col not in present:
            raise ConfigError(f"column {col!r} not in the input header", field=f"input.columns.{key}")
    for kind in ("controls", "fe_labels"):
        for name, col in getattr(m, kind).items():
            if col not in present:
                raise ConfigError(f"column {col!r} not in the input header", field=f"input.columns.{kind}.{name}")


def _write_summary_stats(stats, dest, fmt) -> None:
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["variable", "N", "mean", "sd", "p25", "p50", "p75", "min", "max"])
    for row in stats.table():
        name, n, *vals = row
        w.writerow([name, n, *(fmt(v) for v in vals)])


__all__ = ["COMMANDS", "RunManifest", "fmt6", "fmt_full", "run_pipeline", "sha256_file"]

"""Synthetic panels with a known breakpoint, and the Monte Carlo harness.

The generator draws a county-year panel whose OAI counts follow

    logit p = a + b x + jump * post(c) + kink * after(c)
              + state effect + period effect + unit effect + controls' theta,
    OAI ~ Binomial(inspections, p),

with ``x = ln S``. Inspections follow a log-linear law in scale with their
own jump/kink, which gives the effort outcome a known structure too.
Controls are drawn independently of scale unless coefficients link them.

Replication ``r`` of a Monte Carlo run with master seed ``m`` uses the seed
``SeedSequence([m, r]).generate_state(1)[0]``, so results do not depend on
the order or process in which replications execute.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Mapping
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Any

import numpy as np

from .errors import InvalidConfig
from .panel import ColumnMapping, PanelDataset


@dataclass(frozen=True)
class ControlGenerator:
    """``value = mean + unit_sd * u_unit + noise_sd * e_row``."""

    name: str
    mean: float
    unit_sd: float
    noise_sd: float


DEFAULT_CONTROLS = (
    ControlGenerator("poverty_rate", 15.0, 4.0, 1.5),
    ControlGenerator("ln_mhi", 10.9, 0.2, 0.05),
    ControlGenerator("unemployment_rate", 6.0, 1.5, 1.0),
)


@dataclass(frozen=True)
class SynthConfig:
    n_units: int = 300
    n_periods: int = 10
    first_period: int = 2009
    scale_min: float = 10.0
    scale_max: float = 1000.0
    #: sd of the per-period innovation of ln S (reflected at the bounds)
    scale_drift: float = 0.1
    c_true: float = 70.0
    a: float = -2.5
    b: float = 0.1
    jump: float = 0.3
    kink: float = 0.6
    trials_base: float = 1.2
    trials_elasticity: float = 0.75
    trials_noise: float = 0.3
    trials_min: int = 5
    trials_max: int = 200
    effort_jump: float = 0.0
    effort_kink: float = 0.0
    n_states: int = 20
    n_regions: int = 4
    state_sd: float = 0.3
    period_sd: float = 0.2
    unit_sd: float = 0.0
    controls: tuple[ControlGenerator, ...] = DEFAULT_CONTROLS
    control_effects: Mapping[str, float] = field(default_factory=dict)
    density_unit_sd: float = 1.0
    density_noise_sd: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_units < 1 or self.n_periods < 1:
            raise InvalidConfig("n_units and n_periods must be >= 1", field="synth")
        if not (0 < self.scale_min < self.scale_max):
            raise InvalidConfig("need 0 < scale_min < scale_max", field="synth.scale_min")
        if not (self.scale_min < self.c_true < self.scale_max):
            raise InvalidConfig("c_true must lie strictly inside [scale_min, scale_max]", field="synth.c_true")
        if not (1 <= self.trials_min <= self.trials_max):
            raise InvalidConfig("need 1 <= trials_min <= trials_max", field="synth.trials_min")
        if self.n_states < 1 or self.n_regions < 1:
            raise InvalidConfig("n_states and n_regions must be >= 1", field="synth.n_states")
        for k in self.control_effects:
            if k not in {g.name for g in self.controls}:
                raise InvalidConfig(f"control effect for unknown control {k!r}", field="synth.control_effects")
        object.__setattr__(self, "controls", tuple(
            g if isinstance(g, ControlGenerator) else ControlGenerator(**g) for g in self.controls
        ))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SynthConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown synth keys {sorted(unknown)}", field="synth")
        kw = dict(d)
        if "controls" in kw:
            kw["controls"] = tuple(ControlGenerator(**g) for g in kw["controls"])
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["controls"] = [asdict(g) for g in self.controls]
        d["control_effects"] = dict(self.control_effects)
        return d


def _reflect(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    width = hi - lo
    y = np.mod(v - lo, 2.0 * width)
    return lo + np.where(y > width, 2.0 * width - y, y)


def generate_synthetic(cfg: SynthConfig, *, group_id: str | None = None) -> PanelDataset:
    """Draw one synthetic panel. Same config (including seed) -> identical dataset."""
    rng = np.random.default_rng(cfg.seed)
    U, T = cfg.n_units, cfg.n_periods
    lo, hi = math.log(cfg.scale_min), math.log(cfg.scale_max)

    # log-uniform scale per unit, reflected random walk over periods (keeps the uniform law)
    ls = np.empty((U, T))
    ls[:, 0] = rng.uniform(lo, hi, size=U)
    for t in range(1, T):
        ls[:, t] = _reflect(ls[:, t - 1] + cfg.scale_drift * rng.standard_normal(U), lo, hi)
    S = np.clip(np.rint(np.exp(ls)), math.ceil(cfg.scale_min), math.floor(cfg.scale_max)).astype(np.int64)
    x = np.log(S)
    post = (S > cfg.c_true).astype(float)
    after = post * (x - math.log(cfg.c_true))

    state = np.arange(U) % cfg.n_states
    region = state % cfg.n_regions
    state_eff = cfg.state_sd * rng.standard_normal(cfg.n_states)
    period_eff = cfg.period_sd * rng.standard_normal(T)
    unit_eff = cfg.unit_sd * rng.standard_normal(U)

    ctrl = {}
    for g in cfg.controls:
        ctrl[g.name] = g.mean + g.unit_sd * rng.standard_normal(U)[:, None] + g.noise_sd * rng.standard_normal((U, T))

    log_n = (math.log(cfg.trials_base) + cfg.trials_elasticity * x + cfg.effort_jump * post
             + cfg.effort_kink * after + cfg.trials_noise * rng.standard_normal((U, T)))
    n = np.clip(np.rint(np.exp(log_n)), cfg.trials_min, cfg.trials_max).astype(np.int64)

    eta = (cfg.a + cfg.b * x + cfg.jump * post + cfg.kink * after
           + state_eff[state][:, None] + period_eff[None, :] + unit_eff[:, None])
    for name, theta in cfg.control_effects.items():
        eta = eta + theta * ctrl[name]
    p = 1.0 / (1.0 + np.exp(-eta))
    s = rng.binomial(n, p)
    fac = np.maximum(1, np.rint(n * rng.uniform(0.6, 0.9, size=(U, T)))).astype(np.int64)
    dens = cfg.density_unit_sd * rng.standard_normal(U)[:, None] + cfg.density_noise_sd * rng.standard_normal((U, T))

    width = max(4, len(str(U)))
    units = np.array([f"U{i:0{width}d}" for i in range(U)], dtype=object)
    periods = cfg.first_period + np.arange(T)
    rep = lambda a: np.repeat(a, T)  # noqa: E731
    flat = lambda a: np.asarray(a).reshape(-1)  # noqa: E731
    mapping = ColumnMapping(
        group_id="group_id" if group_id is not None else None,
        facilities="facilities",
        density="density",
        controls={g.name: g.name for g in cfg.controls},
        fe_labels={"state": "state", "region": "region"},
    )
    return PanelDataset.from_arrays(
        unit_id=rep(units),
        period=np.tile(periods, U),
        group_id=None if group_id is None else [group_id] * (U * T),
        scale=flat(S),
        inspections=flat(n),
        successes=flat(s),
        facilities=flat(fac),
        controls={k: flat(v) for k, v in ctrl.items()},
        fe_labels={"state": rep(np.array([f"S{k:02d}" for k in state], dtype=object)),
                   "region": rep(np.array([f"R{k}" for k in region], dtype=object))},
        density=flat(dens),
        schema=mapping,
        provenance={"source": "synthetic", "synth": cfg.to_dict(), "group_id": group_id},
    )


def generate_grouped(groups: Mapping[str, SynthConfig]) -> PanelDataset:
    """Stack one synthetic panel per group (group-specific scale and outcomes)."""
    parts = [generate_synthetic(cfg, group_id=g) for g, cfg in groups.items()]
    first = parts[0]
    cat = lambda attr: np.concatenate([getattr(p, attr) for p in parts])  # noqa: E731
    return PanelDataset.from_arrays(
        unit_id=cat("unit_id"), period=cat("period"), group_id=cat("group_id"),
        scale=cat("scale"), inspections=cat("inspections"), successes=cat("successes"),
        facilities=cat("facilities"),
        controls={k: np.concatenate([p.controls[k] for p in parts]) for k in first.controls},
        fe_labels={k: np.concatenate([p.fe_labels[k] for p in parts]) for k in first.fe_labels},
        density=cat("density"), schema=first.schema,
        provenance={"source": "synthetic", "groups": {g: c.to_dict() for g, c in groups.items()}},
    )


def rep_seed(master_seed: int, rep: int) -> int:
    """Seed of replication ``rep``: ``SeedSequence([master_seed, rep])``, first 32-bit word."""
    return int(np.random.SeedSequence([int(master_seed), int(rep)]).generate_state(1)[0])


# -- Monte Carlo -------------------------------------------------------------


@dataclass(frozen=True)
class MCPipeline:
    """What each replication runs after generating data.

    With ``search=False`` the effects are estimated at the true cutoff (size
    and power of the conditional tests); otherwise at the selected cutoff.
    """

    spec: Any = None  # ModelSpec for the selection objective / OAI outcome
    search_config: Any = None  # SearchConfig
    search: bool = True
    compare_rss: bool = False
    outcomes: tuple[str, ...] = ("oai_rate",)
    placebo_controls: tuple[str, ...] = ()
    placebo_scan: bool = False
    placebo_weighted: bool = False
    flatness_tol: float = 1e-3
    hull_coverage: float = 0.8
    alpha: float = 0.05
    recovery_tol: float = math.log(1.1)


@dataclass
class MCReport:
    n_reps: int
    n_failed: int
    master_seed: int
    records: list[dict[str, Any]]
    summary: dict[str, float]

    def rate(self, key: str) -> float:
        return self.summary[key]


def _one_rep(args) -> dict[str, Any]:
    from .effects import estimate_effects
    from .hetero import placebo_at_cutoff, placebo_scan
    from .search import SearchConfig, search_cutoff

    cfg, pipe, master_seed, r = args
    seed = rep_seed(master_seed, r)
    rec: dict[str, Any] = {"rep": r, "seed": seed, "ok": True, "error": ""}
    try:
        ds = generate_synthetic(replace(cfg, seed=seed))
        spec = pipe.spec
        scfg = pipe.search_config or SearchConfig()
        if pipe.search:
            est, profile = search_cutoff(ds, spec, scfg, alpha=pipe.alpha)
            c_hat = est.c_hat
            grid = profile.candidates
            rec.update(
                c_hat=c_hat,
                recovered=abs(math.log(c_hat) - math.log(cfg.c_true)) <= pipe.recovery_tol,
                grid_size=int(grid.size),
                set_lo=est.profile_interval[0],
                set_hi=est.profile_interval[1],
                covered=est.covers(cfg.c_true, grid),
            )
            if pipe.compare_rss:
                est_rss, prof_rss = search_cutoff(ds, spec, replace(scfg, objective="weighted-rss"), alpha=pipe.alpha)
                i_ll = int(np.searchsorted(grid, c_hat))
                i_rss = int(np.searchsorted(prof_rss.candidates, est_rss.c_hat))
                rec.update(c_hat_rss=est_rss.c_hat, rss_step_gap=abs(i_ll - i_rss),
                           rss_agree=abs(i_ll - i_rss) <= 1)
        else:
            c_hat = cfg.c_true
            rec["c_hat"] = c_hat
        for outcome in pipe.outcomes:
            eff = estimate_effects(ds, spec.replace(outcome=outcome, weights="auto"), c_hat)
            pre = outcome if len(pipe.outcomes) > 1 else ""
            pre = f"{pre}_" if pre else ""
            rec.update({
                f"{pre}jump": eff.jump.estimate, f"{pre}jump_se": eff.jump.se, f"{pre}jump_p": eff.jump.p,
                f"{pre}kink": eff.kink.estimate, f"{pre}kink_se": eff.kink.se, f"{pre}kink_p": eff.kink.p,
            })
        c_plac = cfg.c_true if not pipe.search else c_hat
        for name in pipe.placebo_controls:
            pe = placebo_at_cutoff(ds, name, c_plac, spec.fe, weighted=pipe.placebo_weighted,
                                   running=spec.running, cluster_key=spec.cluster_key)
            rec[f"placebo_{name}_jump_p"] = pe.jump.p
            rec[f"placebo_{name}_kink_p"] = pe.kink.p
            if pipe.placebo_scan:
                res = placebo_scan(ds, name, scfg, spec.fe, flatness_tol=pipe.flatness_tol,
                                   hull_coverage=pipe.hull_coverage, weighted=pipe.placebo_weighted,
                                   running=spec.running, cluster_key=spec.cluster_key)
                rec[f"placebo_{name}_flat"] = res.flat
                rec[f"placebo_{name}_rel_range"] = res.relative_range
                rec[f"placebo_{name}_hull_share"] = res.hull_share
    except Exception as exc:  # per-rep failures are counted, never fatal
        rec["ok"] = False
        rec["error"] = f"{type(exc).__name__}: {exc}"
    return rec


def _summarise(records: list[dict[str, Any]], cfg: SynthConfig, pipe: MCPipeline) -> dict[str, float]:
    ok = [r for r in records if r["ok"]]
    out: dict[str, float] = {"n_ok": float(len(ok))}
    if not ok:
        return out

    def mean_of(key, f=lambda v: float(v)):
        vals = [f(r[key]) for r in ok if key in r]
        return float(np.mean(vals)) if vals else float("nan")

    for key in ("recovered", "covered", "rss_agree"):
        if any(key in r for r in ok):
            out[f"{key}_rate"] = mean_of(key)
    prefixes = [f"{o}_" for o in pipe.outcomes] if len(pipe.outcomes) > 1 else [""]
    for pre in prefixes:
        for term, truth in (("jump", cfg.jump), ("kink", cfg.kink)):
            key = f"{pre}{term}"
            if key not in ok[0]:
                continue
            est = np.array([r[key] for r in ok])
            out[f"{key}_mean"] = float(est.mean())
            out[f"{key}_reject_rate"] = mean_of(f"{key}_p", lambda v: float(v < pipe.alpha))
            if pre in ("", "oai_rate_"):
                # truth is on the logit scale; bias/RMSE are against the logit-scale value
                out[f"{key}_bias_vs_logit_truth"] = float(est.mean() - truth)
                out[f"{key}_rmse_vs_logit_truth"] = float(np.sqrt(np.mean((est - truth) ** 2)))
    for name in pipe.placebo_controls:
        out[f"placebo_{name}_jump_reject_rate"] = mean_of(f"placebo_{name}_jump_p", lambda v: float(v < pipe.alpha))
        out[f"placebo_{name}_kink_reject_rate"] = mean_of(f"placebo_{name}_kink_p", lambda v: float(v < pipe.alpha))
        if pipe.placebo_scan:
            out[f"placebo_{name}_flat_rate"] = mean_of(f"placebo_{name}_flat")
    return out


def run_monte_carlo(cfg: SynthConfig, pipeline: MCPipeline, n_reps: int, *,
                    master_seed: int = 0, n_jobs: int = 1) -> MCReport:
    """Generate -> search -> effects -> record, ``n_reps`` times.

    Failures in a replication are recorded (``ok=False``) and counted; the
    batch never aborts. Records are returned in replication order.
    """
    if n_reps < 1:
        raise InvalidConfig("n_reps must be >= 1", field="mc.n_reps")
    if pipeline.spec is None:
        from .design import ModelSpec
        pipeline = replace(pipeline, spec=ModelSpec())
    jobs = [(cfg, pipeline, master_seed, r) for r in range(n_reps)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            records = list(ex.map(_one_rep, jobs, chunksize=max(1, n_reps // (4 * n_jobs))))
    else:
        records = [_one_rep(j) for j in jobs]
    records.sort(key=lambda r: r["rep"])
    return MCReport(
        n_reps=n_reps,
        n_failed=sum(not r["ok"] for r in records),
        master_seed=master_seed,
        records=records,
        summary=_summarise(records, cfg, pipeline),
    )


def write_records(report: MCReport, dest: IO[str], fmt=repr) -> None:
    keys: list[str] = []
    for r in report.records:
        for k in r:
            if k not in keys:
                keys.append(k)
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(keys)
    for r in report.records:
        w.writerow([_cell(r.get(k, ""), fmt) for k in keys])


def write_summary(report: MCReport, dest: IO[str], fmt=repr) -> None:
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["metric", "value"])
    w.writerow(["n_reps", report.n_reps])
    w.writerow(["n_failed", report.n_failed])
    w.writerow(["master_seed", report.master_seed])
    for k, v in report.summary.items():
        w.writerow([k, _cell(v, fmt)])


def _cell(v, fmt):
    if isinstance(v, (bool, np.bool_)):
        return int(bool(v))
    if isinstance(v, (float, np.floating)):
        return fmt(float(v))
    return v

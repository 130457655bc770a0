"""TOML run configuration.

Every section is parsed into a dataclass with all defaults filled in, so
the canonical form (``RunConfig.to_dict``) lists every setting that
affects a run. Its SHA-256 over sorted-key JSON is the config digest
recorded in the manifest. Unknown keys are rejected with the dotted path
of the offending field.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .design import FixedEffectSpec, ModelSpec
from .errors import ConfigError
from .panel import ColumnMapping, SampleFilter
from .search import SearchConfig
from .synth import SynthConfig


def _check_keys(d: Mapping[str, Any], allowed, where: str) -> None:
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown key (allowed: {', '.join(sorted(allowed))})", field=f"{where}.{k}" if where else k)


def _table(d: Mapping[str, Any], key: str, where: str) -> dict[str, Any]:
    v = d.get(key, {})
    if not isinstance(v, Mapping):
        raise ConfigError("expected a table", field=f"{where}{key}")
    return dict(v)


def _build(cls, d: Mapping[str, Any], where: str):
    """Construct a dataclass section, turning type errors into ConfigError."""
    names = {f.name for f in fields(cls)}
    _check_keys(d, names, where)
    try:
        return cls(**d)
    except ConfigError as exc:
        if exc.field is None or not exc.field.startswith(where):
            raise ConfigError(str(exc), field=where) from None
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field=where) from None


@dataclass(frozen=True)
class InputSection:
    path: str
    columns: ColumnMapping
    on_error: str = "raise"

    def to_dict(self) -> dict[str, Any]:
        return {"path": self.path, "on_error": self.on_error, "columns": self.columns.to_dict()}


@dataclass(frozen=True)
class FilterSection:
    year_min: int | None = None
    year_max: int | None = None
    min_scale: int = 1
    min_inspections: int = 1
    require_controls: bool = True

    def sample_filter(self) -> SampleFilter:
        return SampleFilter(**asdict(self))


@dataclass(frozen=True)
class ModelSection:
    running: str = "log"
    controls: tuple[str, ...] = ()
    fe_factors: tuple[str, ...] = ("period", "state")
    fe_trends: tuple[tuple[str, str], ...] = ()
    fe_reference: dict[str, str] = field(default_factory=dict)
    cluster_key: str = "unit_id"
    outcomes: tuple[str, ...] = ("oai_rate", "effort")
    correction: str = "cr1"
    alpha: float = 0.05

    def __post_init__(self):
        for k in ("controls", "fe_factors", "outcomes"):
            object.__setattr__(self, k, tuple(getattr(self, k)))
        object.__setattr__(self, "fe_trends", tuple(tuple(t) for t in self.fe_trends))
        if any(len(t) != 2 for t in self.fe_trends):
            raise ConfigError("each trend is a [factor, time] pair", field="model.fe_trends")
        if self.correction not in ("cr1", "none"):
            raise ConfigError("must be 'cr1' or 'none'", field="model.correction")
        if not 0 < self.alpha < 1:
            raise ConfigError("must lie in (0, 1)", field="model.alpha")
        if not self.outcomes:
            raise ConfigError("at least one outcome", field="model.outcomes")

    @property
    def fe(self) -> FixedEffectSpec:
        return FixedEffectSpec(factors=self.fe_factors, trends=self.fe_trends, reference=dict(self.fe_reference))

    def spec(self, outcome: str = "oai_rate") -> ModelSpec:
        try:
            return ModelSpec(outcome=outcome, running=self.running, controls=self.controls,
                             fe=self.fe, cluster_key=self.cluster_key)
        except ConfigError as exc:
            raise ConfigError(str(exc), field="model") from None


@dataclass(frozen=True)
class SearchSection:
    p_lo: float = 5.0
    p_hi: float = 95.0
    grid_kind: str = "distinct"
    p_step: float = 1.0
    min_side: int = 80
    search_period_max: int | None = None
    objective: str = "binomial-loglik"
    compare_objectives: bool = True
    c_star: float | None = None
    n_jobs: int = 1

    def __post_init__(self):
        self.search_config()
        if self.c_star is not None and not self.c_star > 0:
            raise ConfigError("must be positive", field="search.c_star")
        if self.n_jobs < 1:
            raise ConfigError("must be >= 1", field="search.n_jobs")

    def search_config(self, objective: str | None = None) -> SearchConfig:
        return SearchConfig(p_lo=self.p_lo, p_hi=self.p_hi, grid_kind=self.grid_kind, p_step=self.p_step,
                            min_side=self.min_side, search_period_max=self.search_period_max,
                            objective=objective or self.objective)


@dataclass(frozen=True)
class HeteroSection:
    enabled: bool = False
    group_key: str = "group_id"
    by_group: bool = True
    terciles: bool = True
    density_var: str = "density"
    n_jobs: int = 1


@dataclass(frozen=True)
class PlaceboSection:
    enabled: bool = False
    controls: tuple[str, ...] = ()
    c_star: float | None = None
    scan: bool = True
    weighted: bool = False
    flatness_tol: float = 1e-3
    hull_coverage: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "controls", tuple(self.controls))
        if not self.flatness_tol > 0:
            raise ConfigError("must be positive", field="placebo.flatness_tol")
        if not 0 <= self.hull_coverage <= 1:
            raise ConfigError("must lie in [0, 1]", field="placebo.hull_coverage")


@dataclass(frozen=True)
class RDPlotSection:
    enabled: bool = False
    n_bins: int = 20
    outcomes: tuple[str, ...] = ("oai_rate", "effort", "oai_per_est")
    c_star: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        if self.n_bins < 2:
            raise ConfigError("must be >= 2", field="rdplot.n_bins")


@dataclass(frozen=True)
class MCSection:
    n_reps: int = 50
    n_jobs: int = 1
    search: bool = True
    compare_rss: bool = False
    outcomes: tuple[str, ...] = ("oai_rate",)
    placebo_controls: tuple[str, ...] = ()
    placebo_scan: bool = False
    recovery_tol: float = math.log(1.1)

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "placebo_controls", tuple(self.placebo_controls))
        if self.n_reps < 1:
            raise ConfigError("must be >= 1", field="mc.n_reps")
        if self.n_jobs < 1:
            raise ConfigError("must be >= 1", field="mc.n_jobs")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "output"
    input: InputSection | None = None
    synth: SynthConfig | None = None
    synth_groups: dict[str, SynthConfig] = field(default_factory=dict)
    filter: FilterSection = field(default_factory=FilterSection)
    model: ModelSection = field(default_factory=ModelSection)
    search: SearchSection = field(default_factory=SearchSection)
    hetero: HeteroSection = field(default_factory=HeteroSection)
    placebo: PlaceboSection = field(default_factory=PlaceboSection)
    rdplot: RDPlotSection = field(default_factory=RDPlotSection)
    mc: MCSection | None = None
    source_path: str | None = None

    def to_dict(self) -> dict[str, Any]:
        """Canonical form: every setting that affects results, defaults included.

        The output directory and source path are not part of it.
        """
        d: dict[str, Any] = {"seed": self.seed}
        d["input"] = None if self.input is None else self.input.to_dict()
        d["synth"] = None if self.synth is None else self.synth.to_dict()
        d["synth_groups"] = {g: c.to_dict() for g, c in sorted(self.synth_groups.items())}
        for name in ("filter", "model", "search", "hetero", "placebo", "rdplot"):
            d[name] = _plain(asdict(getattr(self, name)))
        d["mc"] = None if self.mc is None else _plain(asdict(self.mc))
        return d

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def with_overrides(self, *, output_dir: str | None = None, seed: int | None = None) -> RunConfig:
        cfg = self
        if output_dir is not None:
            cfg = replace(cfg, output_dir=str(output_dir))
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        return cfg

    def synth_config(self) -> SynthConfig | None:
        return None if self.synth is None else replace(self.synth, seed=self.seed)


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def config_digest(d: Mapping[str, Any]) -> str:
    """SHA-256 of the sorted-key, compact JSON encoding."""
    text = json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


TOP_KEYS = {"seed", "output_dir", "input", "synth", "filter", "model", "search", "hetero",
            "placebo", "rdplot", "mc"}


def _parse_input(d: Mapping[str, Any], base: Path | None) -> InputSection:
    _check_keys(d, {"path", "columns", "on_error"}, "input")
    if "path" not in d:
        raise ConfigError("required", field="input.path")
    cols = _table(d, "columns", "input.")
    required = {"unit_id", "period", "scale", "inspections", "successes"}
    for k in sorted(required - set(cols)):
        raise ConfigError("required column mapping", field=f"input.columns.{k}")
    allowed = {"unit_id", "period", "scale", "inspections", "successes", "group_id", "facilities",
               "density", "controls", "fe_labels"}
    _check_keys(cols, allowed, "input.columns")
    try:
        mapping = ColumnMapping.from_dict(cols)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field="input.columns") from None
    path = str(d["path"])
    if base is not None and not os.path.isabs(path):
        path = str((base / path).resolve())
    on_error = d.get("on_error", "raise")
    if on_error not in ("raise", "skip"):
        raise ConfigError("must be 'raise' or 'skip'", field="input.on_error")
    return InputSection(path=path, columns=mapping, on_error=on_error)


def _parse_synth(d: Mapping[str, Any]) -> tuple[SynthConfig, dict[str, SynthConfig]]:
    d = dict(d)
    groups = d.pop("groups", {})
    try:
        base = SynthConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field="synth") from None
    out = {}
    for g, over in dict(groups).items():
        try:
            out[str(g)] = SynthConfig.from_dict({**base.to_dict(), **dict(over)})
        except (ConfigError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc), field=f"synth.groups.{g}") from None
    return base, out


def parse_config(data: Mapping[str, Any], *, base_dir: str | os.PathLike | None = None,
                 source_path: str | None = None) -> RunConfig:
    """Validate a parsed TOML document into a RunConfig.

    Relative ``input.path`` and ``output_dir`` values resolve against
    ``base_dir`` (the config file's directory when loading from disk).
    """
    _check_keys(data, TOP_KEYS, "")
    base = Path(base_dir) if base_dir is not None else None
    has_input, has_synth = "input" in data, "synth" in data
    if has_input == has_synth:
        raise ConfigError("exactly one of [input] or [synth] must be present", field="input")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("must be a non-negative integer", field="seed")
    out_dir = str(data.get("output_dir", "output"))
    if base is not None and not os.path.isabs(out_dir):
        out_dir = str((base / out_dir).resolve())

    inp = _parse_input(_table(data, "input", ""), base) if has_input else None
    synth, groups = _parse_synth(_table(data, "synth", "")) if has_synth else (None, {})
    mc = _build(MCSection, _table(data, "mc", ""), "mc") if "mc" in data else None
    if mc is not None and synth is None:
        raise ConfigError("[mc] needs a [synth] block", field="mc")

    cfg = RunConfig(
        seed=seed, output_dir=out_dir, input=inp, synth=synth, synth_groups=groups,
        filter=_build(FilterSection, _table(data, "filter", ""), "filter"),
        model=_build(ModelSection, _table(data, "model", ""), "model"),
        search=_build(SearchSection, _table(data, "search", ""), "search"),
        hetero=_build(HeteroSection, _table(data, "hetero", ""), "hetero"),
        placebo=_build(PlaceboSection, _table(data, "placebo", ""), "placebo"),
        rdplot=_build(RDPlotSection, _table(data, "rdplot", ""), "rdplot"),
        mc=mc, source_path=source_path,
    )
    cfg.model.spec()
    _check_references(cfg)
    return cfg


def _check_references(cfg: RunConfig) -> None:
    """Names used by the model and placebo blocks must exist in the data source."""
    if cfg.input is not None:
        controls = set(cfg.input.columns.controls)
        labels = set(cfg.input.columns.fe_labels)
        has_group = cfg.input.columns.group_id is not None
        has_density = cfg.input.columns.density is not None
    else:
        sc = cfg.synth
        controls = {g.name for g in sc.controls}
        labels = {"state", "region"}
        has_group = bool(cfg.synth_groups)
        has_density = True
    for c in cfg.model.controls:
        if c not in controls:
            raise ConfigError(f"control {c!r} is not mapped in the data source", field="model.controls")
    for c in cfg.placebo.controls:
        if c not in controls:
            raise ConfigError(f"control {c!r} is not mapped in the data source", field="placebo.controls")
    builtin = {"period", "unit_id", "group_id"}
    for f in cfg.model.fe_factors:
        for part in f.split("*"):
            if part not in labels | builtin:
                raise ConfigError(f"factor {part!r} is not a mapped label", field="model.fe_factors")
    if cfg.model.cluster_key not in labels | builtin:
        raise ConfigError(f"{cfg.model.cluster_key!r} is not a mapped label", field="model.cluster_key")
    if cfg.hetero.enabled:
        if cfg.hetero.group_key == "group_id" and not has_group:
            raise ConfigError("group_id is not mapped in the data source", field="hetero.group_key")
        if cfg.hetero.group_key not in labels | builtin:
            raise ConfigError(f"{cfg.hetero.group_key!r} is not a mapped label", field="hetero.group_key")
        if cfg.hetero.terciles and cfg.hetero.density_var == "density" and not has_density:
            raise ConfigError("density is not mapped in the data source", field="hetero.density_var")


def load_config(path: str | os.PathLike) -> RunConfig:
    """Read and validate a TOML config file.

    Raises
    ------
    ConfigError
        Unreadable file, TOML syntax error or invalid settings.
    """
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", field="config") from None
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"invalid TOML: {exc}", field="config") from None
    return parse_config(data, base_dir=p.parent, source_path=str(p))

"""Threshold (breakpoint) search and piecewise jump/kink estimation on
county-year style panels with grouped binomial outcomes."""

from types import ModuleType as _ModuleType

__version__ = "0.1.0"

from ._kernels import available_backends, backend, use_backend
from .design import (
    BaseDesign,
    DesignMatrix,
    FixedEffectSpec,
    ModelSpec,
    PiecewiseTerms,
    RunningVariable,
    build_design,
    make_running,
    piecewise_terms,
)
from .effects import Coefficient, PiecewiseEffects, estimate_effects, two_sided_p
from .errors import (
    ConfigError,
    DataError,
    EstimationError,
    ThreshPanelError,
)
from .estimators import ClusteredCov, FitResult, binomial_logit_fit, cluster_cov, wls_fit
from .hetero import (
    CutoffPercentile,
    GroupBinResult,
    PlaceboScan,
    RDPlotData,
    cutoff_percentile,
    density_terciles,
    group_bin_search,
    placebo_at_cutoff,
    placebo_scan,
    rd_plot_data,
)
from .panel import (
    ColumnMapping,
    PanelDataset,
    SampleFilter,
    SummaryStats,
    apply_sample_filters,
    ingest_panel,
    nearest_rank,
    summarize,
    write_panel,
)
from .search import (
    CandidateGrid,
    CutoffEstimate,
    SearchConfig,
    SearchProfile,
    build_grid,
    chi2_quantile,
    profile_confidence_set,
    profile_objective,
    search_cutoff,
    select_cutoff,
)
from .synth import MCPipeline, MCReport, SynthConfig, generate_synthetic, run_monte_carlo

__all__ = [name for name, obj in list(globals().items())
           if not name.startswith("_") and not isinstance(obj, _ModuleType)]

import io
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threshpanel.design import BaseDesign, FixedEffectSpec, ModelSpec
from threshpanel.errors import AllCandidatesInvalid, InvalidConfig, NoValidCandidates
from threshpanel.estimators import wls_fit
from threshpanel.panel import PanelDataset, nearest_rank
from threshpanel.search import (
    SearchConfig,
    SearchProfile,
    build_grid,
    chi2_quantile,
    evaluate_objective,
    grid_from_scale,
    profile_confidence_set,
    profile_objective,
    search_cutoff,
    select_cutoff,
    write_profile,
)
from threshpanel.synth import SynthConfig, generate_synthetic

from .conftest import small_panel

CONTROLS = ("poverty_rate", "ln_mhi", "unemployment_rate")


def _profile(pairs, valid=None, kind="binomial-loglik", n_obs=100):
    c = np.array([p[0] for p in pairs], dtype=float)
    v = np.array([p[1] for p in pairs], dtype=float)
    k = c.size
    return SearchProfile(candidates=c, objective=v, valid=np.ones(k, bool) if valid is None else np.array(valid),
                         n_below=np.zeros(k, int), n_above=np.zeros(k, int), kind=kind, n_obs=n_obs)


# -- grid --------------------------------------------------------------------


def _grid_oracle(S, p_lo, p_hi, min_side):
    xs = sorted(S)
    n = len(xs)
    q = lambda p: xs[max(1, math.ceil(p * n / 100)) - 1]  # noqa: E731
    lo, hi = q(p_lo), q(p_hi)
    out = []
    for c in sorted(set(xs)):
        if lo <= c <= hi and sum(s <= c for s in xs) >= min_side and sum(s > c for s in xs) >= min_side:
            out.append(c)
    return out


def test_grid_one_to_two_hundred():
    g = grid_from_scale(np.arange(1, 201), SearchConfig(min_side=20))
    assert g.window == (10.0, 190.0)
    np.testing.assert_array_equal(g.candidates, np.arange(20, 181))
    assert g.n_below[0] == 20 and g.n_above[-1] == 20


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=5, max_size=120), st.integers(1, 15),
       st.sampled_from([(5, 95), (0, 100), (10, 50)]))
def test_grid_matches_enumeration_oracle(S, min_side, window):
    cfg = SearchConfig(p_lo=window[0], p_hi=window[1], min_side=min_side)
    want = _grid_oracle(S, *window, min_side)
    if not want:
        with pytest.raises(NoValidCandidates):
            grid_from_scale(np.array(S), cfg)
        return
    g = grid_from_scale(np.array(S), cfg)
    assert list(g.candidates) == want


def test_all_equal_scale_has_no_candidates():
    with pytest.raises(NoValidCandidates):
        grid_from_scale(np.full(500, 42), SearchConfig(min_side=1))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 1000), min_size=20, max_size=300), st.integers(1, 10))
def test_percentile_grid_subset_of_distinct(S, step):
    S = np.array(S)
    try:
        d = set(grid_from_scale(S, SearchConfig(min_side=3)).candidates)
    except NoValidCandidates:
        return
    try:
        p = set(grid_from_scale(S, SearchConfig(min_side=3, grid_kind="percentile", p_step=step)).candidates)
    except NoValidCandidates:
        return
    assert p <= d


def test_percentile_grid_values():
    S = np.arange(1, 101)
    g = grid_from_scale(S, SearchConfig(grid_kind="percentile", p_step=10, min_side=1))
    np.testing.assert_array_equal(g.candidates, [5, 15, 25, 35, 45, 55, 65, 75, 85, 95])
    assert all(nearest_rank(S, p) in g.candidates for p in (5, 95))


def test_search_period_restriction():
    ds = small_panel(n_units=60, n_periods=4, seed=1)
    cfg = SearchConfig(min_side=10, search_period_max=2011)
    g = build_grid(ds, cfg)
    assert g.n_search == int(np.sum(ds.period <= 2011))
    with pytest.raises(NoValidCandidates):
        build_grid(ds, SearchConfig(min_side=10, search_period_max=1990))


@pytest.mark.parametrize("kw", [dict(p_lo=50, p_hi=50), dict(min_side=0), dict(grid_kind="log"),
                                dict(grid_kind="percentile", p_step=0.5), dict(objective="aic")])
def test_search_config_validation(kw):
    with pytest.raises(InvalidConfig):
        SearchConfig(**kw)


# -- selection ---------------------------------------------------------------


def test_argmax_example():
    est = select_cutoff(_profile([(60, -105), (71, -100), (80, -103)]))
    assert est.c_hat == 71 and est.ln_c_hat == math.log(71)


def test_tie_goes_to_smallest_cutoff():
    assert select_cutoff(_profile([(71, -100), (70, -100), (90, -120)])).c_hat == 70


def test_all_invalid():
    with pytest.raises(AllCandidatesInvalid):
        select_cutoff(_profile([(70, -1), (71, -2)], valid=[False, False]))


def test_invalid_best_is_ignored():
    est = select_cutoff(_profile([(70, 5.0), (71, -2), (72, -3)], valid=[False, True, True]))
    assert est.c_hat == 71


def test_profile_set_example():
    prof = _profile([(68, -101.5), (71, -100), (95, -101.9), (96, -102.5)])
    np.testing.assert_allclose(prof.lr(), [3.0, 0.0, 3.8, 5.0], atol=1e-12)
    members, hull = profile_confidence_set(prof, 0.05)
    assert members == (68.0, 71.0, 95.0) and hull == (68.0, 95.0)
    est = select_cutoff(prof)
    assert est.covers(95, prof.candidates) and not est.covers(96, prof.candidates)
    assert est.covers(80.5)  # off-grid: hull containment


def test_flat_profile_set_is_whole_grid():
    prof = _profile([(c, -7.0) for c in (10, 20, 30, 40)], valid=[True, True, False, True])
    members, _ = profile_confidence_set(prof)
    assert members == (10.0, 20.0, 40.0)


def test_rss_lr_is_gaussian_profile():
    prof = _profile([(10, -2.0), (20, -1.0)], kind="weighted-rss", n_obs=50)
    np.testing.assert_allclose(prof.lr(), [50 * math.log(2.0), 0.0])


def test_chi2_quantile_against_mpmath_inversion():
    mpmath.mp.dps = 30
    cdf = lambda x: mpmath.gammainc(mpmath.mpf(1) / 2, 0, x / 2, regularized=True)  # noqa: E731
    root = mpmath.findroot(lambda x: cdf(x) - mpmath.mpf("0.95"), 3.8)
    assert abs(chi2_quantile(0.95) - 3.8415) < 1e-4
    assert chi2_quantile(0.95) == pytest.approx(float(root), rel=1e-12)
    assert chi2_quantile(0.99) == pytest.approx(6.634897, abs=1e-6)


def test_profile_set_bad_alpha():
    with pytest.raises(ValueError):
        profile_confidence_set(_profile([(1, 0.0)]), 1.0)


# -- objective profiles ------------------------------------------------------


@pytest.fixture(scope="module")
def mid_panel():
    return generate_synthetic(SynthConfig(n_units=100, n_periods=6, seed=77))


@pytest.mark.parametrize("objective", ["binomial-loglik", "weighted-rss"])
def test_profile_matches_from_scratch_fits(mid_panel, objective):
    spec = ModelSpec(controls=CONTROLS)
    cfg = SearchConfig(min_side=40, objective=objective)
    prof = profile_objective(mid_panel, spec, cfg)
    idx = np.linspace(0, prof.candidates.size - 1, 6).astype(int)
    for i in idx:
        val, ok = evaluate_objective(mid_panel, spec, float(prof.candidates[i]), cfg)
        assert ok == prof.valid[i]
        assert prof.objective[i] == pytest.approx(val, rel=1e-9)


def test_fwl_rss_equals_direct_rss(mid_panel):
    spec = ModelSpec(controls=CONTROLS)
    cfg = SearchConfig(min_side=40, objective="weighted-rss")
    prof = profile_objective(mid_panel, spec, cfg)
    base = BaseDesign(mid_panel, spec)
    for i in (0, prof.candidates.size // 2, prof.candidates.size - 1):
        rss = wls_fit(base.with_terms(float(prof.candidates[i]))).rss
        assert -prof.objective[i] == pytest.approx(rss, rel=1e-10)


def test_profile_independent_of_order_and_threads(mid_panel):
    spec = ModelSpec(controls=CONTROLS)
    cfg = SearchConfig(min_side=40)
    grid = build_grid(mid_panel, cfg)
    a = profile_objective(mid_panel, spec, cfg, grid)
    b = profile_objective(mid_panel, spec, cfg, grid, n_jobs=4)
    np.testing.assert_array_equal(a.objective, b.objective)
    perm = np.random.default_rng(0).permutation(len(grid))
    from dataclasses import replace
    g2 = replace(grid, candidates=grid.candidates[perm], n_below=grid.n_below[perm], n_above=grid.n_above[perm])
    c = profile_objective(mid_panel, spec, cfg, g2)
    np.testing.assert_allclose(c.objective[np.argsort(perm)], a.objective, rtol=1e-12)
    assert select_cutoff(c).c_hat == select_cutoff(a).c_hat


def test_monotone_refinement(mid_panel):
    spec = ModelSpec(controls=CONTROLS)
    fine = profile_objective(mid_panel, spec, SearchConfig(min_side=40))
    coarse = profile_objective(mid_panel, spec, SearchConfig(min_side=40, grid_kind="percentile", p_step=5))
    assert fine.objective[fine.valid].max() >= coarse.objective[coarse.valid].max()


def test_profile_set_contains_estimate_and_is_run(mid_panel):
    est, prof = search_cutoff(mid_panel, ModelSpec(controls=CONTROLS), SearchConfig(min_side=40))
    assert est.c_hat in est.profile_set
    assert est.profile_interval[0] in prof.candidates and est.profile_interval[1] in prof.candidates
    assert est.lr_critical == pytest.approx(3.841459, abs=1e-6)


def test_degenerate_candidate_marked_invalid():
    # above 100 every row has zero successes: the logit separates there
    n = 60
    S = np.arange(1, n + 1) * 3
    ds = PanelDataset.from_arrays(unit_id=[f"u{i}" for i in range(n)], period=[2010] * n, scale=S,
                                  inspections=[20] * n, successes=np.where(S > 100, 0, 5),
                                  fe_labels={"state": ["a", "b"] * (n // 2)})
    spec = ModelSpec(fe=FixedEffectSpec(factors=("state",)))
    prof = profile_objective(ds, spec, SearchConfig(min_side=5, p_lo=0, p_hi=100))
    assert not prof.valid.all() and prof.valid.any()
    est = select_cutoff(prof)
    assert prof.valid[list(prof.candidates).index(est.c_hat)]


def test_true_break_dominates_far_candidates():
    spec = ModelSpec(controls=CONTROLS)
    cfg = SearchConfig()
    wins = 0
    reps = 10
    for r in range(reps):
        ds = generate_synthetic(SynthConfig(seed=1000 + r))
        l0, ok = evaluate_objective(ds, spec, 70.0, cfg)
        prof = profile_objective(ds, spec, cfg)
        far = prof.valid & (np.abs(np.log(prof.candidates) - math.log(70.0)) > 0.5)
        wins += bool(ok and np.all(prof.objective[far] < l0))
    assert wins >= 0.95 * reps


def test_write_profile_table(mid_panel):
    _, prof = search_cutoff(mid_panel, ModelSpec(), SearchConfig(min_side=40))
    buf = io.StringIO()
    write_profile(prof, buf)
    rows = buf.getvalue().splitlines()
    assert rows[0] == "c,ln_c,objective,valid,n_below,n_above,lr,in_profile_set"
    assert len(rows) == prof.candidates.size + 1
    assert sum(r.endswith(",1") for r in rows[1:]) >= 1

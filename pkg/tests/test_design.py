import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threshpanel.design import (
    PRUNE_TOL,
    BaseDesign,
    FixedEffectSpec,
    ModelSpec,
    build_design,
    make_running,
    piecewise_terms,
    running_from_scale,
    write_design,
)
from threshpanel.errors import (
    InvalidConfig,
    NonPositiveScale,
    RankDeficientBeyondRepair,
    UnknownFactorLabel,
)
from threshpanel.estimators import wls_fit
from threshpanel.panel import PanelDataset

from .conftest import small_panel


def grid_panel(n_states=2, n_years=2, units_per_state=4, seed=0, regions=None):
    rng = np.random.default_rng(seed)
    units = [(s, u) for s in range(n_states) for u in range(units_per_state)]
    rows = [(s, u, t) for (s, u) in units for t in range(n_years)]
    n = len(rows)
    labels = {"state": [f"S{s}" for s, _, _ in rows]}
    if regions is not None:
        labels["region"] = [f"R{s % regions}" for s, _, _ in rows]
    return PanelDataset.from_arrays(
        unit_id=[f"c{s}{u}" for s, u, _ in rows],
        period=[2010 + t for _, _, t in rows],
        scale=rng.integers(10, 500, size=n),
        inspections=rng.integers(5, 50, size=n),
        successes=rng.integers(0, 5, size=n),
        controls={"z": rng.standard_normal(n)},
        fe_labels=labels,
    )


# -- running variable and piecewise terms ------------------------------------


def test_ln_71_four_decimals():
    x = running_from_scale(np.array([71]), "log").values[0]
    assert round(x, 4) == 4.2627


def test_running_edge_cases(panel):
    assert running_from_scale(np.array([1]), "log").values[0] == 0.0
    with pytest.raises(NonPositiveScale):
        running_from_scale(np.array([0, 3]), "log")
    lv = make_running(panel, "level")
    np.testing.assert_array_equal(lv.values, panel.scale.astype(float))
    with pytest.raises(InvalidConfig):
        running_from_scale(np.array([3]), "sqrt")


@pytest.mark.parametrize(
    "S, post, after",
    [(142, 1.0, math.log(2)), (71, 0.0, 0.0), (35, 0.0, 0.0)],
)
def test_piecewise_examples(S, post, after):
    S_arr = np.array([S, 10, 200])
    t = piecewise_terms(S_arr, running_from_scale(S_arr), 71.0)
    assert t.post[0] == post
    assert t.after[0] == pytest.approx(after, abs=1e-15)


def test_piecewise_level_mode():
    S = np.array([50, 71, 100])
    t = piecewise_terms(S, running_from_scale(S, "level"), 71.0)
    np.testing.assert_array_equal(t.post, [0, 0, 1])
    np.testing.assert_array_equal(t.after, [0, 0, 29])


def test_cutoff_outside_range_warns_but_computes():
    S = np.array([5, 6, 7])
    with pytest.warns(UserWarning, match="outside"):
        t = piecewise_terms(S, running_from_scale(S), 100.0)
    assert t.post.sum() == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=50), st.floats(1.0, 10_000.0))
def test_piecewise_identities(S, c):
    S = np.array(S)
    x = running_from_scale(S)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        t = piecewise_terms(S, x, c)
    np.testing.assert_array_equal(t.post, (S > c).astype(float))
    np.testing.assert_array_equal(t.after, t.post * (x.values - math.log(c)))
    assert np.all(t.after[t.post == 0] == 0)
    assert np.all(t.after[t.post == 1] > 0)


# -- design construction -----------------------------------------------------


def _fe(*factors, **kw):
    return FixedEffectSpec(factors=factors, **kw)


def test_two_states_two_years_column_count():
    ds = grid_panel()
    spec = ModelSpec(fe=_fe("period", "state"))
    dm = build_design(ds, spec, piecewise_terms(ds.scale, make_running(ds), float(np.median(ds.scale))))
    assert dm.columns == ("intercept", "x", "post", "after", "fe:period=2011", "fe:state=S1")
    assert dm.dropped_columns == ()


def test_reference_level_override():
    ds = grid_panel()
    spec = ModelSpec(fe=_fe("state", reference={"state": "S1"}))
    dm = BaseDesign(ds, spec).without_terms()
    assert "fe:state=S0" in dm.columns and "fe:state=S1" not in dm.columns
    with pytest.raises(UnknownFactorLabel):
        BaseDesign(ds, ModelSpec(fe=_fe("state", reference={"state": "S9"})))


def test_interaction_region_by_year_has_five_dummies():
    ds = grid_panel(n_states=4, n_years=3, regions=2)
    dm = BaseDesign(ds, ModelSpec(fe=_fe("region*period"))).without_terms()
    inter = [c for c in dm.columns if c.startswith("fe:region*period=")]
    assert len(inter) == 5


def test_duplicated_control_pruned_and_rank_oracle():
    ds = grid_panel(n_states=3, n_years=3)
    ds2 = PanelDataset.from_arrays(
        unit_id=ds.unit_id, period=ds.period, scale=ds.scale, inspections=ds.inspections,
        successes=ds.successes, fe_labels=ds.fe_labels,
        controls={"z": ds.controls["z"], "z_copy": ds.controls["z"] * 3.0},
    )
    spec = ModelSpec(controls=("z", "z_copy"), fe=_fe("period", "state"))
    base = BaseDesign(ds2, spec)
    dm = base.with_terms(float(np.median(ds2.scale)))
    assert dm.dropped_columns == ("z_copy",)
    X = dm.X
    # dense oracle: the retained design has full rank and the cross product has rank K
    assert np.linalg.matrix_rank(X.T @ X) == dm.n_cols
    z_copy = ds2.controls["z_copy"][dm.row_index]
    coef, *_ = np.linalg.lstsq(X, z_copy, rcond=None)
    assert np.linalg.norm(X @ coef - z_copy) < 1e-9 * np.linalg.norm(z_copy)


def test_pruned_columns_lie_in_span_random():
    rng = np.random.default_rng(9)
    for seed in range(10):
        ds = small_panel(n_units=10, n_periods=3, n_states=4, seed=seed, controls=("a", "b"))
        a, b = ds.controls["a"], ds.controls["b"]
        combo = 2 * a - 0.5 * b + rng.standard_normal() * 0
        ds = PanelDataset.from_arrays(
            unit_id=ds.unit_id, period=ds.period, scale=ds.scale, inspections=ds.inspections,
            successes=ds.successes, fe_labels=ds.fe_labels, controls={"a": a, "b": b, "ab": combo},
        )
        base = BaseDesign(ds, ModelSpec(controls=("a", "b", "ab")))
        dm = base.without_terms()
        assert "ab" in dm.dropped_columns
        assert dm.condition_number() < 1e8


def test_piecewise_collinear_with_state_dummy_raises():
    # every unit in state S1 is large and every unit in S0 small: post == state dummy
    n = 8
    ds = PanelDataset.from_arrays(
        unit_id=[f"u{i}" for i in range(n)], period=[2010] * n,
        scale=[10, 12, 14, 16, 200, 210, 220, 230], inspections=[10] * n, successes=[2, 3, 1, 2, 3, 4, 2, 5],
        fe_labels={"state": ["S0"] * 4 + ["S1"] * 4},
    )
    base = BaseDesign(ds, ModelSpec(fe=_fe("state")))
    with pytest.raises(RankDeficientBeyondRepair):
        base.with_terms(100.0)
    assert not base.check_terms(*[getattr(base.terms_at(100.0), k) for k in ("post", "after")])


def test_check_terms_agrees_with_full_pruning(panel):
    from threshpanel.design import _greedy_basis

    base = BaseDesign(panel, ModelSpec(controls=("z1",)))
    X0 = base.without_terms().X
    for c in np.unique(panel.scale)[::7]:
        t = base.terms_at(float(c))
        keep, _, _ = _greedy_basis([*X0.T, t.post, t.after])
        assert base.check_terms(t.post, t.after) == all(keep)


def test_trend_columns_are_centered_label_times_period():
    ds = grid_panel(n_states=2, n_years=3)
    spec = ModelSpec(fe=FixedEffectSpec(factors=("period", "state"), trends=(("state", "period"),)))
    dm = BaseDesign(ds, spec).without_terms()
    name = "trend:state*period=S0"
    col = dm.X[:, dm.index(name)]
    per = ds.period[dm.row_index]
    expected = np.where(ds.fe_labels["state"][dm.row_index] == "S0", per - 2011.0, 0.0)
    np.testing.assert_array_equal(col, expected)


def test_unknown_factor_and_cluster_key(panel):
    with pytest.raises(UnknownFactorLabel):
        BaseDesign(panel, ModelSpec(fe=_fe("county_type")))
    with pytest.raises(UnknownFactorLabel):
        BaseDesign(panel, ModelSpec(cluster_key="nowhere"))


def test_zero_weight_rows_excluded_and_counted():
    n = 30
    rng = np.random.default_rng(1)
    ins = rng.integers(1, 9, size=n)
    ins[[3, 7]] = 0
    ds = PanelDataset.from_arrays(unit_id=[f"u{i}" for i in range(n)], period=[2010] * n,
                                  scale=rng.integers(5, 100, size=n), inspections=ins,
                                  successes=np.minimum(ins, 1), fe_labels={"state": ["s"] * n})
    dm = BaseDesign(ds, ModelSpec(fe=_fe())).with_terms(50.0)
    assert dm.n_excluded == 2
    assert dm.n_rows == n - 2
    assert np.all(dm.weights > 0)


def test_weight_rules(panel):
    assert ModelSpec().weight_rule == "inspections"
    assert ModelSpec(outcome="effort").weight_rule == "establishments"
    assert ModelSpec(outcome="oai_per_est").weight_rule == "establishments"
    assert ModelSpec(outcome="z1").weight_rule == "none"
    with pytest.raises(InvalidConfig):
        ModelSpec(outcome="oai_rate", weights="establishments")
    dm = BaseDesign(panel, ModelSpec(outcome="effort")).without_terms()
    np.testing.assert_array_equal(dm.weights, panel.scale[dm.row_index])


def test_reference_level_leaves_fit_unchanged():
    ds = small_panel(n_units=20, n_periods=4, n_states=4, seed=2)
    c = float(np.median(ds.scale))
    fits = []
    for ref in ("s0", "s2"):
        spec = ModelSpec(controls=("z1",), fe=_fe("period", "state", reference={"state": ref}))
        dm = BaseDesign(ds, spec).with_terms(c)
        fits.append(wls_fit(dm))
    a, b = fits
    np.testing.assert_allclose(a.fitted, b.fitted, rtol=1e-10, atol=1e-13)
    for name in ("post", "after", "x"):
        assert a.coef(name) == pytest.approx(b.coef(name), rel=1e-10)


def test_empty_fe_level_changes_nothing():
    ds = small_panel(n_units=20, n_periods=4, n_states=3, seed=4)
    c = float(np.median(ds.scale))
    a = wls_fit(BaseDesign(ds, ModelSpec(fe=_fe("state"))).with_terms(c))
    spec_b = ModelSpec(fe=_fe("state", levels={"state": ["s0", "s1", "s2", "s9"]}))
    dm_b = BaseDesign(ds, spec_b).with_terms(c)
    b = wls_fit(dm_b)
    assert "fe:state=s9" in dm_b.dropped_columns
    np.testing.assert_allclose(a.coefficients, b.coefficients, rtol=1e-12)


def test_column_order_deterministic(panel):
    spec = ModelSpec(controls=("z1",))
    cols = {BaseDesign(panel, spec).with_terms(100.0).columns for _ in range(3)}
    assert len(cols) == 1
    (c,) = cols
    assert c[:5] == ("intercept", "x", "post", "after", "z1")


def test_write_design_dump(panel):
    import io

    dm = BaseDesign(panel, ModelSpec()).with_terms(100.0)
    buf = io.StringIO()
    write_design(dm, buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == dm.n_rows + 1
    assert lines[0].split(",")[4:8] == ["intercept", "x", "post", "after"]
    assert PRUNE_TOL == 1e-9

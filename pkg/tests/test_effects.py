import io
import math
import warnings
from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from threshpanel.design import FixedEffectSpec, ModelSpec
from threshpanel.effects import (
    EFFECTS_HEADER,
    CutoffOutOfRange,
    estimate_effects,
    two_sided_p,
    write_effects_table,
)
from threshpanel.errors import InvalidDof
from threshpanel.panel import PanelDataset
from threshpanel.synth import SynthConfig, generate_synthetic, rep_seed

from .conftest import small_panel

CONTROLS = ("poverty_rate", "ln_mhi", "unemployment_rate")


def _t_sf_oracle(t, dof):
    """Upper tail of Student t through the regularized incomplete beta, 40 digits."""
    mpmath.mp.dps = 40
    t, v = mpmath.mpf(t), mpmath.mpf(dof)
    return mpmath.betainc(v / 2, mpmath.mpf(1) / 2, 0, v / (v + t * t), regularized=True) / 2


def test_p_at_zero_is_one():
    assert two_sided_p(0.0, 10) == 1.0


def test_p_196_dof_1000():
    p = two_sided_p(1.96, 1000)
    assert abs(p - 0.0502) < 5e-4
    assert p == pytest.approx(float(2 * _t_sf_oracle(1.96, 1000)), rel=1e-10)


@pytest.mark.parametrize("t, dof", [(0.5, 3), (2.5, 30), (6.0, 2992), (40.0, 100)])
def test_p_matches_incomplete_beta_oracle(t, dof):
    assert two_sided_p(t, dof) == pytest.approx(float(2 * _t_sf_oracle(t, dof)), rel=1e-9)


def test_p_symmetric_and_tail_precision():
    assert two_sided_p(-2.0, 50) == two_sided_p(2.0, 50)
    assert two_sided_p(30.0, 1000) == pytest.approx(float(2 * _t_sf_oracle(30.0, 1000)), rel=1e-9)


@given(st.floats(0, 50), st.floats(0, 50), st.integers(1, 5000))
def test_p_monotone_in_abs_t(a, b, dof):
    lo, hi = sorted((a, b))
    assert two_sided_p(hi, dof) <= two_sided_p(lo, dof)
    assert 0.0 <= two_sided_p(hi, dof) <= 1.0


@pytest.mark.parametrize("dof", [0, -3])
def test_invalid_dof(dof):
    with pytest.raises(InvalidDof):
        two_sided_p(1.0, dof)


def test_effects_fields(baseline_panel):
    e = estimate_effects(baseline_panel, ModelSpec(controls=CONTROLS), 70.0)
    assert e.n_rows == 3000 and e.n_clusters == 300
    assert e.dof == e.n_rows - (4 + 3 + 9 + 19)
    assert e.ln_c == math.log(70.0)
    for c in (e.jump, e.kink, e.slope_below):
        assert c.se >= 0 and 0 <= c.p <= 1
    # positive kink on the logit scale shows up as a positive kink in the rate
    assert e.kink.estimate > 0 and e.kink.p < 0.05


def test_shift_invariance_level_mode():
    ds = small_panel(n_units=40, n_periods=3, seed=6, scale_range=(5, 300))
    k = 1000
    shifted = PanelDataset.from_arrays(
        unit_id=ds.unit_id, period=ds.period, scale=ds.scale + k, inspections=ds.inspections,
        successes=ds.successes, controls=ds.controls, fe_labels=ds.fe_labels,
    )
    spec = ModelSpec(running="level", controls=("z1",))
    a = estimate_effects(ds, spec, 120.0)
    b = estimate_effects(shifted, spec, 120.0 + k)
    assert b.jump.estimate == pytest.approx(a.jump.estimate, rel=1e-10)
    assert b.kink.estimate == pytest.approx(a.kink.estimate, rel=1e-10)
    assert b.kink.se == pytest.approx(a.kink.se, rel=1e-8)


def test_empty_fe_level_changes_nothing(panel):
    fe_a = FixedEffectSpec(factors=("period", "state"))
    fe_b = FixedEffectSpec(factors=("period", "state"), levels={"state": ["s0", "s1", "s2", "ghost"]})
    a = estimate_effects(panel, ModelSpec(fe=fe_a), 100.0)
    b = estimate_effects(panel, ModelSpec(fe=fe_b), 100.0)
    assert "fe:state=ghost" in b.dropped_columns
    for name in ("jump", "kink", "slope_below"):
        ca, cb = getattr(a, name), getattr(b, name)
        assert cb.estimate == pytest.approx(ca.estimate, rel=1e-10)
        assert cb.se == pytest.approx(ca.se, rel=1e-10)
    assert (a.n_rows, a.dof) == (b.n_rows, b.dof)


def test_cutoff_one_sided_warns(panel):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        with pytest.warns(CutoffOutOfRange):
            try:
                estimate_effects(panel, ModelSpec(), float(panel.scale.max()) + 1)
            except Exception:  # post/after collinear with nothing left to estimate
                pass


def test_zero_weight_rows_reported():
    n = 40
    rng = np.random.default_rng(3)
    ins = rng.integers(1, 30, size=n)
    ins[:3] = 0
    ds = PanelDataset.from_arrays(unit_id=[f"u{i % 10}" for i in range(n)], period=[2010 + i // 10 for i in range(n)],
                                  scale=rng.integers(5, 300, size=n), inspections=ins,
                                  successes=np.minimum(ins, 2))
    e = estimate_effects(ds, ModelSpec(fe=FixedEffectSpec(factors=())), 100.0)
    assert e.n_excluded == 3 and e.n_rows == n - 3


def test_known_effects_recovered_within_two_se():
    # linear effort DGP with known jump/kink; trials unclipped so the log law stays linear
    cfg = SynthConfig(effort_jump=0.05, effort_kink=0.02, trials_min=1, trials_max=10**6)
    spec = ModelSpec(outcome="effort", controls=CONTROLS)
    hits = 0
    for r in range(50):
        ds = generate_synthetic(replace(cfg, seed=rep_seed(2024, r)))
        e = estimate_effects(ds, spec, 70.0)
        hits += abs(e.jump.estimate - 0.05) <= 2 * e.jump.se and abs(e.kink.estimate - 0.02) <= 2 * e.kink.se
    assert hits >= 45


def test_effects_table_shape(panel):
    effs = [estimate_effects(panel, ModelSpec(outcome=o), 100.0) for o in ("oai_rate", "effort")]
    buf = io.StringIO()
    write_effects_table(effs, buf, fmt=lambda v: format(v, ".6g"))
    lines = buf.getvalue().splitlines()
    assert lines[0].split(",") == EFFECTS_HEADER
    assert [ln.split(",")[0] for ln in lines[1:]] == ["oai_rate", "effort"]

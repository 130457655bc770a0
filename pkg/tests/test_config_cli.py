import json
import os
import textwrap
from pathlib import Path

import pytest

from threshpanel import cli
from threshpanel.config import load_config, parse_config
from threshpanel.errors import ConfigError
from threshpanel.panel import write_panel
from threshpanel.pipeline import COMMANDS, fmt6, fmt_full, run_pipeline, sha256_file
from threshpanel.synth import SynthConfig, generate_synthetic

COLS = {k: k for k in ("unit_id", "period", "scale", "inspections", "successes")}
CONFIGS = Path(__file__).resolve().parents[1] / "configs"

BASE = """
seed = 3
output_dir = "out"

[input]
path = "panel.csv"

[input.columns]
unit_id = "unit_id"
period = "period"
scale = "scale"
inspections = "inspections"
successes = "successes"

[input.columns.controls]
poverty_rate = "poverty_rate"
ln_mhi = "ln_mhi"

[input.columns.fe_labels]
state = "state"

[model]
controls = ["poverty_rate", "ln_mhi"]
outcomes = ["oai_rate", "effort"]

[search]
min_side = 30
"""


@pytest.fixture(scope="module")
def panel_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    ds = generate_synthetic(SynthConfig(n_units=40, n_periods=5, seed=21))
    with open(d / "panel.csv", "w", newline="") as fh:
        write_panel(ds, fh)
    return d / "panel.csv"


def _write_cfg(tmp_path, panel_csv, extra="", base=BASE):
    text = base.replace('"panel.csv"', json.dumps(str(panel_csv))) + textwrap.dedent(extra)
    p = tmp_path / "run.toml"
    p.write_text(text)
    return p


def _outputs(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir()) if p.name != "manifest.json"}


# -- parsing -----------------------------------------------------------------


@pytest.mark.parametrize("doc, field", [
    ({"synth": {}, "search": {"min_sides": 3}}, "search.min_sides"),
    ({"synth": {}, "colour": 1}, "colour"),
    ({}, "input"),
    ({"synth": {}, "input": {"path": "x"}}, "input"),
    ({"input": {"path": "x", "columns": COLS}, "mc": {}}, "mc"),
    ({"synth": {}, "model": {"controls": ["rainfall"]}}, "model.controls"),
    ({"synth": {}, "model": {"fe_factors": ["county_type"]}}, "model.fe_factors"),
    ({"synth": {}, "model": {"alpha": 1.5}}, "model.alpha"),
    ({"synth": {}, "search": {"p_lo": 60, "p_hi": 40}}, "search.p_lo"),
    ({"synth": {}, "seed": -1}, "seed"),
    ({"synth": {"c_true": 5000.0}}, "synth.c_true"),
    ({"synth": {"groups": {"a": {"c_true": -1.0}}}}, "synth.groups.a"),
    ({"input": {"path": "x", "columns": {"unit": "fips"}}}, "input.columns"),
    ({"synth": {}, "hetero": {"enabled": True}}, "hetero.group_key"),
])
def test_config_errors_name_the_field(doc, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(doc)
    assert exc.value.field is not None and exc.value.field.startswith(field)
    assert exc.value.exit_code == 2


def test_defaults_materialised_and_echoed():
    cfg = parse_config({"synth": {}})
    d = cfg.to_dict()
    assert d["search"]["min_side"] == 80 and d["search"]["p_lo"] == 5.0 and d["search"]["p_hi"] == 95.0
    assert d["placebo"]["flatness_tol"] == 1e-3 and d["placebo"]["hull_coverage"] == 0.8
    assert d["model"]["correction"] == "cr1"
    assert d["synth"]["c_true"] == 70.0


def test_digest_stable_and_sensitive():
    a = parse_config({"synth": {}, "seed": 1, "output_dir": "x"})
    b = parse_config({"synth": {}, "seed": 1, "output_dir": "y"})
    assert a.digest() == b.digest() and len(a.digest()) == 64
    assert a.with_overrides(seed=2).digest() != a.digest()
    assert parse_config({"synth": {"c_true": 71.0}, "seed": 1}).digest() != a.digest()


def test_relative_paths_resolve_against_config_dir(tmp_path):
    p = tmp_path / "sub" / "c.toml"
    p.parent.mkdir()
    cols = "".join(f'{k} = "{k}"\n' for k in COLS)
    p.write_text(f'output_dir = "../o"\n[input]\npath = "d.csv"\n[input.columns]\n{cols}'
                 '[model]\nfe_factors = ["period"]\n')
    cfg = load_config(p)
    assert cfg.output_dir == str((tmp_path / "o").resolve())
    assert cfg.input.path == str((tmp_path / "sub" / "d.csv").resolve())


def test_shipped_configs_parse():
    for p in sorted(CONFIGS.glob("*.toml")):
        cfg = load_config(p)
        assert (cfg.input is None) != (cfg.synth is None), p.name
    assert load_config(CONFIGS / "example_synth_all.toml").synth_groups["bakeries"].c_true == 15.0


def test_bad_toml(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("seed = = 1")
    with pytest.raises(ConfigError):
        load_config(p)


# -- CLI ---------------------------------------------------------------------


def test_every_command_has_a_parser():
    parser = cli.build_parser()
    for name in COMMANDS:
        ns = parser.parse_args([name, "-c", "x.toml", "-o", "d", "-s", "5"])
        assert (ns.command, ns.config, ns.output_dir, ns.seed) == (name, "x.toml", "d", 5)


def test_effects_run_writes_tables_and_manifest(tmp_path, panel_csv, capsys):
    cfg = _write_cfg(tmp_path, panel_csv)
    assert cli.main(["effects", "-c", str(cfg)]) == 0
    out = tmp_path / "out"
    assert capsys.readouterr().out.strip() == str(out / "manifest.json")
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["stages"] == ["ingest", "search", "effects"]
    names = {f["name"] for f in man["files"]}
    assert {"profile_baseline.csv", "profile_baseline_full.csv", "effects.csv", "effects_full.csv",
            "cutoff.csv", "panel.csv"} <= names
    for f in man["files"]:
        assert sha256_file(out / f["name"]) == f["sha256"]
    header = (out / "effects.csv").read_text().splitlines()[0]
    assert header.startswith("outcome,N,n_clusters,dof,c_star,ln_c_star,jump")
    assert man["config_digest"] == load_config(cfg).digest()


def test_six_digit_and_full_companions(tmp_path, panel_csv):
    cfg = _write_cfg(tmp_path, panel_csv)
    assert cli.main(["effects", "-c", str(cfg), "-o", str(tmp_path / "o")]) == 0
    short = (tmp_path / "o" / "effects.csv").read_text().splitlines()[1].split(",")
    full = (tmp_path / "o" / "effects_full.csv").read_text().splitlines()[1].split(",")
    assert short[0] == full[0]
    for s, f in zip(short[4:-1], full[4:-1]):
        assert s == fmt6(float(f))
        assert f == fmt_full(float(f))
    assert fmt6(0.123456789) == "0.123457" and fmt6(1234567.0) == "1.23457e+06"


def test_byte_identical_reruns_and_seed_override(tmp_path, panel_csv):
    cfg = _write_cfg(tmp_path, panel_csv, extra="""
        [placebo]
        enabled = true
        controls = ["poverty_rate"]
        """)
    for d in ("a", "b"):
        assert cli.main(["all", "-c", str(cfg), "-o", str(tmp_path / d)]) == 0
    a, b = _outputs(tmp_path / "a"), _outputs(tmp_path / "b")
    assert a == b
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["files"] == mb["files"] and ma["config_digest"] == mb["config_digest"]
    assert cli.main(["all", "-c", str(cfg), "-o", str(tmp_path / "c"), "-s", "99"]) == 0
    mc = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert mc["config_digest"] != ma["config_digest"] and mc["config"]["seed"] == 99


def test_parallel_candidates_identical_bytes(tmp_path, panel_csv):
    cfg1 = _write_cfg(tmp_path, panel_csv)
    assert cli.main(["search", "-c", str(cfg1), "-o", str(tmp_path / "serial")]) == 0
    (tmp_path / "p").mkdir()
    cfg2 = _write_cfg(tmp_path / "p", panel_csv, extra="", base=BASE.replace("min_side = 30", "min_side = 30\nn_jobs = 3"))
    assert cli.main(["search", "-c", str(cfg2), "-o", str(tmp_path / "parallel")]) == 0
    assert _outputs(tmp_path / "serial") == _outputs(tmp_path / "parallel")


def test_stage_isolation(tmp_path, panel_csv):
    on = _write_cfg(tmp_path, panel_csv, extra="""
        [placebo]
        enabled = true
        controls = ["ln_mhi"]

        [rdplot]
        enabled = true
        n_bins = 6
        outcomes = ["oai_rate"]
        """)
    assert cli.main(["all", "-c", str(on), "-o", str(tmp_path / "on")]) == 0
    (tmp_path / "x").mkdir()
    off = _write_cfg(tmp_path / "x", panel_csv)
    assert cli.main(["all", "-c", str(off), "-o", str(tmp_path / "off")]) == 0
    a, b = _outputs(tmp_path / "on"), _outputs(tmp_path / "off")
    assert set(b) < set(a)
    assert any(n.startswith("placebo") for n in a) and any(n.startswith("rdplot") for n in a)
    for name in b:
        assert a[name] == b[name], name


def test_exit_code_config_missing_column(tmp_path, panel_csv, capsys):
    cfg = _write_cfg(tmp_path, panel_csv, extra="")
    text = cfg.read_text().replace('ln_mhi = "ln_mhi"', 'ln_mhi = "log_income"')
    cfg.write_text(text)
    assert cli.main(["search", "-c", str(cfg)]) == 2
    assert "input.columns.controls.ln_mhi" in capsys.readouterr().err


def test_exit_code_missing_config(tmp_path):
    assert cli.main(["search", "-c", str(tmp_path / "nope.toml")]) == 2


def test_exit_code_data_error(tmp_path, panel_csv, capsys):
    lines = panel_csv.read_text().splitlines()
    head = lines[0].split(",")
    row = lines[1].split(",")
    row[head.index("successes")] = str(int(row[head.index("inspections")]) + 1)
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join([lines[0], ",".join(row), *lines[2:]]) + "\n")
    cfg = _write_cfg(tmp_path, bad)
    assert cli.main(["ingest", "-c", str(cfg)]) == 3
    err = capsys.readouterr().err
    assert "ParseError in stage ingest" in err
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["status"] == "failed" and man["error"].startswith("ingest")


def test_exit_code_estimation_error(tmp_path, panel_csv, capsys):
    cfg = _write_cfg(tmp_path, panel_csv, base=BASE.replace("min_side = 30", "min_side = 5000"))
    assert cli.main(["search", "-c", str(cfg)]) == 4
    assert "NoValidCandidates in stage search" in capsys.readouterr().err


def test_synth_and_mc_commands(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text(textwrap.dedent("""
        seed = 4
        output_dir = "o"
        [synth]
        n_units = 30
        n_periods = 4
        [search]
        min_side = 20
        [mc]
        n_reps = 2
        search = false
        placebo_controls = ["poverty_rate"]
        """))
    assert cli.main(["synth", "-c", str(p)]) == 0
    assert (tmp_path / "o" / "synthetic_panel.csv").read_text().count("\n") == 121
    assert cli.main(["mc", "-c", str(p), "-o", str(tmp_path / "m")]) == 0
    summary = (tmp_path / "m" / "mc_summary_full.csv").read_text()
    assert "n_reps,2" in summary and "placebo_poverty_rate_jump_reject_rate" in summary


def test_run_pipeline_api(tmp_path, panel_csv):
    cfg = load_config(_write_cfg(tmp_path, panel_csv)).with_overrides(output_dir=str(tmp_path / "api"))
    man = run_pipeline(cfg, "ingest")
    assert man.stages == ["ingest"] and man.row_counts["ingested"] == 200
    assert os.path.exists(tmp_path / "api" / "summary_stats.csv")
    with pytest.raises(ConfigError):
        run_pipeline(cfg, "mc")

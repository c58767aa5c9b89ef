import json

import pytest

from ruinmix import cli

SMALL = """
[model]
name = "mg1_pareto"

[run]
b = [30.0, 60.0]
n = 40
seed = 11

[overrides]
cutoff_override = [["frac", 0.9]]

[baselines]
ak = true
ak_n = 200
crude = true
crude_n = 200
"""


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def test_estimate_writes_csv_and_sidecar(small_config, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["estimate", "--config", str(small_config), "--out", str(out), "--quiet"]) == 0
    lines = (out / "small.csv").read_text().splitlines()
    assert lines[0] == ",".join(cli.CSV_COLUMNS)
    assert len(lines) == 1 + 2 * 3
    row = lines[1].split(",")
    assert row[1] == "is" and row[-1] == ""
    assert row[3].count("e") == 1 and len(row[3].split("e")[0].replace(".", "")) == 17
    side = json.loads((out / "small.json").read_text())
    assert side["params"]["cutoff_override"] == [["frac", 0.9]]
    assert side["config"]["run"]["seed"] == 11


def test_seed_and_shards_byte_identical(small_config, tmp_path):
    outs = []
    for shards in ("1", "4"):
        out = tmp_path / f"o{shards}"
        cli.main(["estimate", "--config", str(small_config), "--seed", "7", "--shards", shards,
                  "--out", str(out), "--quiet"])
        outs.append((out / "small.csv").read_bytes())
    assert outs[0] == outs[1]


def test_timings_fill_column(small_config, tmp_path):
    cli.main(["estimate", "--config", str(small_config), "--out", str(tmp_path), "--quiet",
              "--timings"])
    row = (tmp_path / "small.csv").read_text().splitlines()[1].split(",")
    assert float(row[-1]) >= 0


def test_env_output_dir(small_config, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    assert cli.main(["estimate", "--config", str(small_config), "--quiet"]) == 0
    assert (tmp_path / "envout" / "small.csv").exists()


@pytest.mark.parametrize("bad", [
    SMALL + "\n[extra]\nx = 1\n",
    SMALL.replace("seed = 11", "seed = 11\nsede = 3"),
    SMALL.replace('name = "mg1_pareto"', 'name = "lognormal"'),
    SMALL.replace("n = 40", "n = 1"),
    SMALL.replace("n = 40", 'n = "40"'),
    "[model]\nname='weibull_type'\n",
    "not toml [",
])
def test_config_errors_exit_nonzero(tmp_path, bad):
    p = tmp_path / "bad.toml"
    p.write_text(bad)
    assert cli.main(["estimate", "--config", str(p), "--out", str(tmp_path), "--quiet"]) == \
        cli.EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert cli.main(["estimate", "--config", str(tmp_path / "nope.toml"), "--quiet"]) == \
        cli.EXIT_CONFIG


def test_gamma_out_of_range_is_config_error(tmp_path):
    p = tmp_path / "g.toml"
    p.write_text("[model]\nname='mg1_pareto'\nservice_index=1.4\ninterarrival_mean=3.2\n"
                 "[run]\nmode='gamma_moment'\ngamma=0.7\nb=[100.0]\nn=10\n")
    assert cli.main(["estimate", "--config", str(p), "--out", str(tmp_path), "--quiet"]) == \
        cli.EXIT_CONFIG


def test_verify_strict_fails_with_tiny_kappa(tmp_path):
    p = tmp_path / "v.toml"
    p.write_text("[model]\nname='mg1_pareto'\n[run]\nb=[100.0]\nn=10\n"
                 "[overrides]\nkappa=100.0\n")
    code = cli.main(["verify", "--config", str(p), "--out", str(tmp_path), "--verify", "strict",
                     "--quiet"])
    assert code == cli.EXIT_VERIFY
    side = json.loads((tmp_path / "v-verify.json").read_text())
    assert side["verification"]["1.0000000000000000e+02"]["passed"] is False


def test_verify_default_passes(tmp_path):
    p = tmp_path / "v.toml"
    p.write_text("[model]\nname='weibull_type'\n[run]\nb=[100.0]\nn=10\n")
    assert cli.main(["verify", "--config", str(p), "--out", str(tmp_path), "--verify", "strict",
                     "--quiet"]) == 0


def test_censoring_exit(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[model]\nname='mg1_pareto'\n[run]\nb=[1000.0]\nn=10\nmax_steps=5\n")
    assert cli.main(["estimate", "--config", str(p), "--out", str(tmp_path), "--quiet"]) == \
        cli.EXIT_CENSORED


def test_diagnose_coupling(tmp_path):
    p = tmp_path / "d.toml"
    p.write_text("[model]\nname='mg1_pareto'\n[run]\nmode='total_variation'\nb=[200.0]\nn=50\n"
                 "[overrides]\nepsilon=0.05\na_star_star=0.05\n[diagnostics]\ncoupling=true\n")
    assert cli.main(["diagnose", "--config", str(p), "--out", str(tmp_path), "--quiet"]) == 0
    side = json.loads((tmp_path / "d-diagnose.json").read_text())
    assert "equal_fraction" in side["coupling"]["2.0000000000000000e+02"]


def test_reproduce_small(tmp_path):
    assert cli.main(["reproduce", "table2", "--n", "20", "--out", str(tmp_path), "--quiet"]) == 0
    rows = (tmp_path / "table2.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == [
        "2.5000000000000000e+02", "5.0000000000000000e+02", "6.5000000000000000e+02"]


def test_bundled_configs_parse():
    t1 = cli.bundled_config("table1")
    assert t1.b == [100.0, 1000.0, 10000.0] and t1.n == 100000
    assert t1.overrides["cutoff_override"] == [["frac", 0.9]]
    t2 = cli.bundled_config("table2")
    assert len(t2.overrides["cutoff_override"]) == 5

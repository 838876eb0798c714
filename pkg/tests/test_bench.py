import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from viforge.bench import cli
from viforge.bench.config import (DEFAULTS, EXPERIMENTS, ExperimentConfig, RunRecord, default_config,
                                  load_config, parse_config_text)
from viforge.bench.experiments import loglog_slope, run_experiment, summarize, write_outputs
from viforge.data import Dataset, write_csv
from viforge.errors import ConfigError

FIXTURES = Path(__file__).resolve().parent / "fixtures"
sys.path.insert(0, str(FIXTURES))

import make_gas_turbine  # noqa: E402


def test_parse_config_text():
    text = """
    # comment
    [experiment]
    model = "gbdt"     # trailing comment
    seed = 3
    rho_grid = [0.0, 0.5]
    auto-step = true
    rule_sigma = 0.5
    """
    assert parse_config_text(text) == {"model": "gbdt", "seed": 3, "rho_grid": [0.0, 0.5],
                                       "auto_step": True, "rule_sigma": 0.5}


@pytest.mark.parametrize("text", ["seed 3", "seed = [1,", "1x = 2"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_load_config(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text('experiment = "corr-linear"\nn = 500\nrho_grid = [0.5]\n')
    cfg = load_config(f, seed=9)
    assert (cfg.experiment, cfg.n, cfg.rho_grid, cfg.seed) == ("corr-linear", 500, (0.5,), 9)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml", "rate")
    f.write_text("n = 5\n")
    with pytest.raises(ConfigError):
        load_config(f)


def test_defaults_are_valid_configs():
    for exp in EXPERIMENTS:
        cfg = default_config(exp)
        for key, value in DEFAULTS[exp].items():
            assert getattr(cfg, key) == value
    assert default_config("rate").model == "gbdt"
    assert default_config("wald-coverage").replicates == 100


@pytest.mark.parametrize("kw", [dict(experiment="nope"), dict(experiment="rate", model="svm"),
                                dict(experiment="rate", replicates=0), dict(experiment="rate", q=1.0),
                                dict(experiment="rate", methods=("loco",)), dict(experiment="rate", n_grid=())])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw)


def test_unknown_override_key():
    with pytest.raises(ConfigError):
        default_config("rate", widht=3)


def test_stop_sigma_default():
    assert default_config("rate", noise_sd=0.5).stop_sigma == 0.5
    assert default_config("rate", rule_sigma=2.0).stop_sigma == 2.0


def test_run_record_rejects_non_finite_and_strips_timing():
    with pytest.raises(ValueError):
        RunRecord("rate", 0, 0, metrics={"x": float("nan")})
    rec = RunRecord("rate", 0, 0, metrics={"x": 1.0, "vi_ms": 3.0}, wall_ms=5.0)
    assert rec.to_dict(timing=False)["metrics"] == {"x": 1.0}
    assert rec.to_dict()["wall_ms"] == 5.0


def test_loglog_slope_exact_power_law():
    ns = np.array([100, 200, 400, 800])
    assert loglog_slope(ns, 3.0 / ns) == pytest.approx(-1.0)


def small_corr(tmp_path, **kw):
    return default_config("corr-linear", model="gbdt", n=400, rho_grid=(0.0, 0.75), replicates=2,
                          out_dir=str(tmp_path), **kw)


def test_corr_linear_records_and_summary(tmp_path):
    cfg = small_corr(tmp_path)
    records = run_experiment(cfg)
    assert len(records) == 2 * 2 * 3
    assert {r.params["method"] for r in records} == {"early_stop", "dropout", "retrain"}
    for r in records:
        assert r.metrics["truth"] == pytest.approx(2.25 * (1 - r.params["rho"] ** 2))
    rows = summarize(cfg, records)["rows"]
    assert len(rows) == 6
    out = write_outputs(cfg, records)
    assert {p.name for p in out.iterdir()} == {"records.json", "records.csv", "summary.json", "config.json"}
    blob = json.loads((out / "records.json").read_text())
    assert blob["schema"] == 1 and len(blob["records"]) == 12


def run_cli(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_experiment_rerun_is_bit_identical(tmp_path, capsys):
    argv = ["wald-coverage", "--seed", "4", "--replicates", "3", "--set", "n=300", "--set", "rho_grid=[0.5]"]
    code_a, out_a, _ = run_cli(argv + ["--out", str(tmp_path / "a")], capsys)
    code_b, _, _ = run_cli(argv + ["--out", str(tmp_path / "b")], capsys)
    assert code_a == code_b == 0
    assert json.loads(out_a)["records"] == 3
    assert (tmp_path / "a" / "records.json").read_bytes() == (tmp_path / "b" / "records.json").read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert 0.0 <= summary["rows"][0]["coverage"] <= 1.0


def test_cli_config_file(tmp_path, capsys):
    f = tmp_path / "c.toml"
    f.write_text('model = "gbdt"\nn_grid = [100, 200]\nreplicates = 2\n')
    code, out, _ = run_cli(["rate", "--config", str(f), "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    summary = json.loads(out)["summary"]
    assert summary["n"] == [100, 200] and np.isfinite(summary["slope_empirical"])


@pytest.fixture(scope="module")
def csv_file(tmp_path_factory):
    g = np.random.default_rng(0)
    x = g.standard_normal((150, 3))
    d = Dataset(x, 2 * x[:, 0] + x[:, 1] + 0.3 * g.standard_normal(150), ("a", "b", "c"))
    path = tmp_path_factory.mktemp("csv") / "d.csv"
    write_csv(d, path, "y")
    return str(path)


GBDT = ["--model", "gbdt"]


@pytest.mark.parametrize("method", ["earlystop", "dropout", "retrain"])
def test_cli_vi(csv_file, capsys, method):
    code, out, _ = run_cli(["vi", "--data", csv_file, "--target", "y", "--drop", "a", "--method", method, *GBDT],
                           capsys)
    rec = json.loads(out)
    assert code == 0 and rec["features"] == [0] and rec["ci"][0] <= rec["vi_hat"] <= rec["ci"][1]
    assert rec["vi_hat"] > 0.5


def test_console_script_runs_as_module(csv_file):
    proc = subprocess.run([sys.executable, "-m", "viforge.bench.cli", "vi", "--data", csv_file, "--target", "y",
                           "--drop", "0", "--method", "dropout", *GBDT], capture_output=True, text=True, check=False)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["method"] == "dropout"


def test_cli_shapley_and_diag(csv_file, capsys):
    code, out, _ = run_cli(["shapley", "--data", csv_file, "--target", "y", "--samples", "4",
                            "--method", "dropout", *GBDT], capsys)
    recs = json.loads(out)
    assert code == 0 and [r["feature"] for r in recs] == ["a", "b", "c"]
    code, out, _ = run_cli(["diag", "--data", csv_file, "--target", "y", "--drop", "c", "--sigma", "0.3",
                            *GBDT, "--set", "borders=4"], capsys)
    diag = json.loads(out)
    assert code == 0 and diag["t_max"] >= 0 and diag["rho_hat"] > 0 and diag["dropped"] == [2]


@pytest.mark.parametrize("argv", [
    ["vi", "--data", "/nonexistent.csv", "--target", "y", "--drop", "0"],
    ["vi", "--data", "{csv}", "--target", "missing", "--drop", "0"],
    ["vi", "--data", "{csv}", "--target", "y", "--drop", "zz"],
    ["rate", "--set", "bogus=1"],
    ["rate", "--config", "/nonexistent.toml"],
])
def test_cli_config_errors_exit_2(csv_file, capsys, argv):
    code, _, err = run_cli([a.replace("{csv}", csv_file) for a in argv], capsys)
    assert code == 2 and err.startswith("viforge:")


def test_cli_budget_error_exit_3(tmp_path, capsys):
    g = np.random.default_rng(1)
    path = tmp_path / "wide.csv"
    write_csv(Dataset(g.standard_normal((40, 13)), g.standard_normal(40)), path, "y")
    code, _, err = run_cli(["shapley", "--data", str(path), "--target", "y", "--exact", *GBDT,
                            "--set", "max_epochs=2"], capsys)
    assert code == 3 and "budget" in err


def test_cli_parse_error_on_bad_cell(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("a,y\n1,2\nx,3\n")
    code, _, err = run_cli(["vi", "--data", str(path), "--target", "y", "--drop", "0"], capsys)
    assert code == 2 and "row 3" in err


def test_real_csv_golden_fixture():
    golden = json.loads((FIXTURES / "gas_turbine_golden.json").read_text())
    records = make_gas_turbine.golden_records()
    assert len(records) == len(golden) == 9 * 2
    assert {(r["params"]["feature"], r["params"]["method"]) for r in records} == \
        {(c, m) for c in make_gas_turbine.COLUMNS for m in ("early_stop", "dropout")}
    for got, want in zip(records, golden):
        assert got["params"] == want["params"]
        for k, v in want["metrics"].items():
            assert got["metrics"][k] == pytest.approx(v, rel=1e-9, abs=1e-12)
    phi = {(r["params"]["feature"], r["params"]["method"]): r["metrics"]["phi_hat"] for r in records}
    top = max(make_gas_turbine.COLUMNS, key=lambda c: phi[(c, "early_stop")])
    assert phi[(top, "dropout")] >= phi[(top, "early_stop")]


def test_real_csv_needs_data():
    with pytest.raises(ConfigError):
        run_experiment(default_config("real-csv"))

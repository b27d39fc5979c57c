import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import BAR_HEADER, minute_bar_rows

from esn_intraday import cli
from esn_intraday.config import ConfigError, RunConfig
from esn_intraday.pipeline import InvariantViolation, sha256_file
from esn_intraday.reservoir import DEFAULT_SPECS

SMALL = {"N": 20, "J": 2, "n_days": 20}


def _config(tmp_path, **kw):
    d = {"seed": 3, "output": "out", "data": {"source": "synthetic", "synthetic": dict(SMALL)},
         "evaluation": {"start_day": 14, "mcs_draws": 300}, "tuning": {"budget": 2}}
    d.update(kw)
    p = tmp_path / "run.json"
    p.write_text(json.dumps(d))
    return p


def _run(*args):
    return cli.main([str(a) for a in args])


def _audit(out):
    """Every manifest's checksums match the files on disk; returns covered paths."""
    covered = set()
    for m in sorted(out.glob("manifest_*.json")):
        man = json.loads(m.read_text())
        assert man["seed"] == RunConfig.from_dict(man["config"], env={}).seed
        for rel, digest in man["outputs"].items():
            assert sha256_file(out / rel) == digest, rel
            covered.add(rel)
    return covered


def test_simulate_minimal_spec(tmp_path):
    cfg = _config(tmp_path, data={"source": "synthetic", "synthetic": {"N": 2, "J": 1, "T": 100}},
                  output=str(tmp_path / "new" / "dir"))
    assert _run("simulate", "--config", cfg) == 0
    out = tmp_path / "new" / "dir"
    assert sorted(p.name for p in out.iterdir()) == ["manifest_simulate.json", "panel.bin", "panel.csv"]
    man = json.loads((out / "manifest_simulate.json").read_text())
    assert man["seed"] == 3 and man["command"] == "simulate" and len(man["config_hash"]) == 64
    assert len((out / "panel.csv").read_text().splitlines()) == 1 + 100 * 2
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert _run("simulate", "--config", cfg) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first


def test_seed_flag_and_env_override(tmp_path, monkeypatch):
    cfg = _config(tmp_path, data={"source": "synthetic", "synthetic": {"N": 2, "J": 1, "T": 50}})
    assert _run("simulate", "--config", cfg, "--seed", 9, "--out", tmp_path / "a") == 0
    assert json.loads((tmp_path / "a" / "manifest_simulate.json").read_text())["seed"] == 9
    monkeypatch.setenv("ESN_INTRADAY_SEED", "11")
    monkeypatch.setenv("ESN_INTRADAY_OUTPUT", str(tmp_path / "b"))
    assert _run("simulate", "--config", cfg) == 0
    assert json.loads((tmp_path / "b" / "manifest_simulate.json").read_text())["seed"] == 11


def test_config_errors_exit_2(tmp_path):
    assert _run("simulate", "--config", tmp_path / "nope.json") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert _run("simulate", "--config", bad) == 2
    assert _run("simulate", "--config", _config(tmp_path, colour="blue")) == 2
    assert _run("simulate", "--config", _config(tmp_path, horizons=["5min"])) == 2
    assert _run("simulate", "--config", _config(tmp_path), "--models", "esn,lstm") == 2
    assert _run("ingest", "--config", _config(tmp_path)) == 2
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"training": {"10min": {"buffer": "0min"}}}, env={})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"reservoir": {"EOD": {"alpha": 2.0}}}, env={})


def test_missing_inputs_exit_3(tmp_path):
    cfg = _config(tmp_path, output=str(tmp_path / "empty"))
    for cmd in ("signals", "backtest", "evaluate", "tune", "report"):
        assert _run(cmd, "--config", cfg) == 3, cmd
    bars = _config(tmp_path, data={"source": "bars", "path": "no_such_dir"})
    assert _run("ingest", "--config", bars) == 3


def test_invariant_violation_exit_4(tmp_path, monkeypatch):
    cfg = _config(tmp_path, output=str(tmp_path / "o"))
    assert _run("simulate", "--config", cfg) == 0

    def leak(*a, **k):
        raise InvariantViolation("planted")

    monkeypatch.setattr(cli, "backtest", leak)
    assert _run("backtest", "--config", cfg) == 4


def test_resolved_config_carries_horizon_defaults():
    cfg = RunConfig.from_dict({}, env={})
    res = cfg.resolved()
    for h, spec in DEFAULT_SPECS.items():
        for k in ("alpha", "rho", "gamma", "a_sparsity", "c_sparsity", "K"):
            assert res["reservoir"][h][k] == getattr(spec, k)
    assert res["training"]["2hr"]["buffer"] == 12
    assert cfg.digest() == RunConfig.from_dict({"seed": 0}, env={}).digest()
    assert cfg.digest() != RunConfig.from_dict({"seed": 1}, env={}).digest()


def test_fragments_merge_relative_to_config(tmp_path):
    (tmp_path / "tuned.json").write_text(json.dumps({"reservoir": {"10min": {"alpha": 0.3}}}))
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"fragments": ["tuned.json"]}))
    cfg = RunConfig.load(p, env={})
    assert cfg.reservoir_spec("10min").alpha == 0.3
    assert cfg.reservoir_spec("10min").rho == DEFAULT_SPECS["10min"].rho


def test_full_command_chain(tmp_path):
    cfg = _config(tmp_path, output=str(tmp_path / "run"))
    out = tmp_path / "run"
    for cmd in ("simulate", "signals", "backtest", "evaluate", "tune", "report"):
        assert _run(cmd, "--config", cfg) == 0, cmd
    forecasts = sorted(p.name for p in (out / "forecasts").iterdir())
    assert len(forecasts) == 15
    man = json.loads((out / "manifest_backtest.json").read_text())
    assert man["config"]["reservoir"]["10min"]["alpha"] == 0.9
    assert man["config"]["reservoir"]["EOD"]["rho"] == 0.0
    report = json.loads((out / "evaluation" / "report.json").read_text())
    for h, r in report["horizons"].items():
        assert r["relative_reduction"]["baseline"] == "[0.0000%]"
        assert len(r["diebold_mariano"]) == 3
    specs = sorted(p.name for p in (out / "tuning").glob("spec_*.json"))
    assert len(specs) == 5
    tuned = json.loads((out / "tuning" / "tuned.json").read_text())
    merged = RunConfig.load(cfg, env={}).merge(tuned)
    for h in DEFAULT_SPECS:
        frag = json.loads((out / "tuning" / f"spec_{h}.json").read_text())
        assert merged.reservoir_spec(h).to_dict() == frag["reservoir"][h]
        trials = (out / "tuning" / f"trials_{h}.csv").read_text().splitlines()
        assert len(trials) == 1 + 2  # budget honored
        assert frag["tuning"][h]["sample_end"] < str(np.datetime64("2013-01-22T09:30"))
    assert "relative MSFE change" in (out / "evaluation" / "report.txt").read_text()
    covered = _audit(out)
    written = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and not p.name.startswith("manifest_")}
    assert written <= covered


def test_single_model_run_has_no_dm_table(tmp_path):
    cfg = _config(tmp_path, output=str(tmp_path / "one"), models=["baseline"], horizons=["10min", "EOD"])
    for cmd in ("simulate", "backtest", "evaluate"):
        assert _run(cmd, "--config", cfg) == 0
    out = tmp_path / "one"
    assert sorted(p.name for p in (out / "forecasts").iterdir()) == ["baseline_10min.csv", "baseline_EOD.csv"]
    assert not (out / "evaluation" / "dm.csv").exists()
    assert "diebold_mariano" not in (out / "evaluation" / "report.json").read_text()


def test_end_to_end_reports_are_byte_identical(tmp_path):
    digests = []
    for k in range(2):
        cfg = _config(tmp_path, output=str(tmp_path / f"r{k}"), horizons=["10min", "60min"])
        for cmd in ("simulate", "backtest", "evaluate"):
            assert _run(cmd, "--config", cfg) == 0
        out = tmp_path / f"r{k}"
        digests.append({str(p.relative_to(out)): sha256_file(p) for p in sorted(out.rglob("*.csv"))
                        if "forecasts" in p.parts or "evaluation" in p.parts}
                       | {"report": sha256_file(out / "evaluation" / "report.json")})
    assert digests[0] == digests[1]


def test_ingest_from_bars(tmp_path):
    rng = np.random.default_rng(0)
    lines = [BAR_HEADER]
    for date in ("20130102", "20130103"):
        for tic in ("AAA", "BBB", "CCC"):
            lines += minute_bar_rows(tic, date, list(np.round(50 * np.exp(np.cumsum(rng.normal(0, 1e-3, 391))), 4)))
    lines.append("20130103,AAA,9999,1,1,1,1,1,1,1")
    (tmp_path / "bars").mkdir()
    (tmp_path / "bars" / "day.csv").write_text("\n".join(lines) + "\n")
    cfg = _config(tmp_path, data={"source": "bars", "path": "bars"}, output=str(tmp_path / "ing"))
    assert _run("ingest", "--config", cfg) == 0
    out = tmp_path / "ing"
    assert len(json.loads((out / "rejected_rows.json").read_text())) == 1
    assert len((out / "panel.csv").read_text().splitlines()) == 1 + 2 * 40 * 3
    _audit(out)


def test_module_entry_point(tmp_path):
    cfg = _config(tmp_path, data={"source": "synthetic", "synthetic": {"N": 2, "J": 1, "T": 40}},
                  output=str(tmp_path / "m"))
    r = subprocess.run([sys.executable, "-m", "esn_intraday.cli", "simulate", "--config", str(cfg)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "esn_intraday.cli", "evaluate", "--config", str(cfg)],
                       capture_output=True, text=True)
    assert r.returncode == 3 and "run backtest" in r.stderr

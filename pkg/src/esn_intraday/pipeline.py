"""End-to-end wiring shared by the command line and the tests."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .evaluation import EvaluationReport, evaluate
from .market_data import ReturnPanel, TradingCalendar, compute_returns, ingest_bars, resample_bars
from .signals import SignalPanel, build_signal_panel
from .storage import (load_panel_cache, load_signal_cache, save_panel_cache, save_signal_cache, write_panel_csv,
                      write_signal_csv)
from .synthetic import simulate_panel
from .training import ForecastSet, Schedule, read_forecasts, run_baseline, run_benchmark, run_esn, write_forecasts
from .tuning import SearchSpace, TuningResult, tune


class InvariantViolation(RuntimeError):
    pass


class MissingInputError(FileNotFoundError):
    pass


PANEL_FILES = ("panel.csv", "panel.bin")
SIGNAL_FILES = ("signals.csv", "signals.bin")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, name: str, cfg: RunConfig, files: list[Path], **extra) -> Path:
    outputs = {str(p.relative_to(out)): sha256_file(p) for p in sorted(files)}
    path = out / f"manifest_{name}.json"
    path.write_text(json.dumps(cfg.manifest(name, outputs, **extra), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


@contextmanager
def mapper_for(jobs: int):
    """``map`` for one job, a process pool otherwise (results keep input order)."""
    if jobs <= 1:
        yield map
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            yield ex.map


# ---------------------------------------------------------------- stages


def build_panel(cfg: RunConfig) -> tuple[ReturnPanel, dict]:
    """Simulate or ingest the return panel; also returns a data report."""
    data = cfg.raw["data"]
    if data["source"] == "synthetic":
        return simulate_panel(cfg.synthetic_spec()), {}
    path = Path(data["path"])
    if cfg.source_path is not None and not path.is_absolute():
        path = cfg.source_path.parent / path
    if not path.exists():
        raise MissingInputError(f"bar data not found: {path}")
    bars = ingest_bars(path, max_errors=data.get("max_errors"))
    cal = TradingCalendar().with_days(np.unique(bars.date))
    tenmin = resample_bars(bars, 10, cal)
    panel = compute_returns(tenmin, cal, overnight=bool(data.get("overnight", False)))
    rejected = [{"line": e.line, "reason": e.reason} for e in bars.rejected]
    return panel, {"rejected_rows": rejected}


def save_panel(panel: ReturnPanel, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f for f in PANEL_FILES]
    write_panel_csv(panel, paths[0])
    save_panel_cache(panel, paths[1])
    return paths


def load_panel(out: Path) -> ReturnPanel:
    p = out / "panel.bin"
    if p.exists():
        return load_panel_cache(p)
    raise MissingInputError(f"no return panel in {out}: expected {out / PANEL_FILES[1]} (run simulate or ingest)")


def save_signals(sig: SignalPanel, out: Path) -> list[Path]:
    paths = [out / f for f in SIGNAL_FILES]
    write_signal_csv(sig, paths[0])
    save_signal_cache(sig, paths[1])
    return paths


def load_or_build_signals(cfg: RunConfig, panel: ReturnPanel, out: Path) -> SignalPanel:
    p = out / "signals.bin"
    if p.exists():
        sig = load_signal_cache(p)
        if len(sig.times) == len(panel.times) and np.all(sig.times == panel.times):
            return sig
    return build_signal_panel(panel, cfg.signal_config())


@dataclass
class _BacktestJob:
    signals: SignalPanel
    panel: ReturnPanel
    cfg: RunConfig

    def __call__(self, task) -> ForecastSet:
        model, h = task
        hc = self.cfg.horizon_config(h)
        kw = {"washout_days": self.cfg.washout_days}
        if model == "baseline":
            return run_baseline(self.signals, self.panel, hc, **kw)
        if model == "benchmark":
            return run_benchmark(self.signals, self.panel, hc, cv_scheme=self.cfg.cv_scheme, **kw)
        return run_esn(self.signals, self.panel, hc, self.cfg.reservoir_spec(h), cv_scheme=self.cfg.cv_scheme, **kw)


def audit_no_lookahead(fs: ForecastSet, panel: ReturnPanel) -> int:
    """Count forecasts whose fit used a target realized after the forecast time."""
    rows = np.flatnonzero(np.isfinite(fs.predictions).any(axis=1))
    return int(np.sum(fs.trained_through[rows] > rows))


def backtest(cfg: RunConfig, panel: ReturnPanel, signals: SignalPanel, mapper=map) -> list[ForecastSet]:
    tasks = [(m, h) for h in cfg.horizons for m in cfg.models]
    out = list(mapper(_BacktestJob(signals, panel, cfg), tasks))
    for fs in out:
        bad = audit_no_lookahead(fs, panel)
        if bad:
            raise InvariantViolation(f"{fs.model}/{fs.horizon}: {bad} forecasts trained on unrealized targets")
    return out


def forecast_path(out: Path, model: str, horizon: str) -> Path:
    return out / "forecasts" / f"{model}_{horizon}.csv"


def save_forecasts(sets: list[ForecastSet], out: Path) -> list[Path]:
    (out / "forecasts").mkdir(parents=True, exist_ok=True)
    paths = []
    for fs in sets:
        p = forecast_path(out, fs.model, fs.horizon)
        write_forecasts(fs, p)
        paths.append(p)
    return paths


def load_forecasts(cfg: RunConfig, panel: ReturnPanel, out: Path) -> list[ForecastSet]:
    sets = []
    for h in cfg.horizons:
        for m in cfg.models:
            p = forecast_path(out, m, h)
            if not p.exists():
                raise MissingInputError(f"missing forecasts {p} (run backtest)")
            fs = read_forecasts(p, panel.times, panel.tickers)
            if fs.model != m or fs.horizon != h:
                raise MissingInputError(f"{p} holds {fs.model}/{fs.horizon}, expected {m}/{h}")
            sets.append(fs)
    return sets


def evaluation_start(cfg: RunConfig, panel: ReturnPanel):
    """First timestamp of the evaluation period (``evaluation.start_day``)."""
    day = int(cfg.raw["evaluation"].get("start_day", 0))
    lay = panel.layout()
    if day >= lay.n_days:
        raise ValueError(f"evaluation.start_day {day} is beyond the {lay.n_days}-day sample")
    return panel.times[np.flatnonzero(lay.day == day)[0]]


def run_evaluation(cfg: RunConfig, panel: ReturnPanel, sets: list[ForecastSet]) -> EvaluationReport:
    ev = cfg.raw["evaluation"]
    models = set(cfg.models)
    baseline = ev.get("baseline", "baseline")
    if baseline not in models:
        baseline = sorted(models)[0]
    return evaluate(sets, panel, baseline, float(ev.get("mcs_alpha", 0.05)), int(ev.get("mcs_draws", 10_000)),
                    cfg.seed, evaluation_start(cfg, panel))


def run_tuning(cfg: RunConfig, panel: ReturnPanel, signals: SignalPanel, mapper=map) -> list[TuningResult]:
    """Tune each configured horizon on the days before ``evaluation.start_day``."""
    start = evaluation_start(cfg, panel)
    pre = np.flatnonzero(panel.times < start)
    if pre.size == 0:
        raise ValueError("tuning needs a pre-sample: set evaluation.start_day > 0")
    pre_panel = panel.slice_rows(pre)
    pre_sig = SignalPanel(signals.times[pre], signals.tickers, signals.Z[pre], signals.missing_mask[pre],
                          signals.windows)
    t = cfg.raw["tuning"]
    results = []
    for h in cfg.horizons:
        base = cfg.reservoir_spec(h)
        space = SearchSpace(K=base.K, budget=int(t.get("budget", 50)), seed=int(t.get("seed", 0)),
                            reservoir_seed=base.seed)
        results.append(tune(space, pre_sig, pre_panel, cfg.horizon_config(h), evaluation_start=start, mapper=mapper,
                            washout_days=cfg.washout_days, cv_scheme=cfg.cv_scheme))
    return results


def merge_fragments(results: list[TuningResult]) -> dict:
    frag: dict = {"reservoir": {}, "tuning": {}}
    for r in results:
        f = r.fragment()
        frag["reservoir"].update(f["reservoir"])
        frag["tuning"].update(f["tuning"])
    return frag

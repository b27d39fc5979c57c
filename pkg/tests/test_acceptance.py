"""Acceptance suite: one PASS/FAIL line per criterion, printed with the
measured value and the tolerance it is judged against.

Run with ``pytest tests/test_acceptance.py -v``; the lines appear inline and
again in the terminal summary.
"""

import csv
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from esn_intraday import cli
from esn_intraday.config import RunConfig
from esn_intraday.evaluation import diebold_mariano, model_confidence_set, msfe_series, robustness_study
from esn_intraday.market_data import horizon_targets
from esn_intraday.pipeline import evaluation_start, load_forecasts, load_or_build_signals, load_panel, sha256_file
from esn_intraday.reservoir import (ReservoirSpec, ReservoirWeights, contraction_rate, run_state_sequence,
                                    sample_weights)
from esn_intraday.signals import extract_factors, factor_regression, ou_estimate, standardize_returns
from esn_intraday.synthetic import SyntheticMarketSpec, simulate_ou, simulate_panel
from esn_intraday.training import (HorizonConfig, Schedule, TrainingBatch, ridge_fit, run_baseline, run_benchmark,
                                   run_esn)
from esn_intraday.tuning import SearchSpace

HORIZONS = ("10min", "30min", "60min", "2hr", "EOD")
RESULTS: dict[int, str] = {}


@pytest.fixture()
def emit(capsys):
    def _emit(k: int, ok: bool, detail: str):
        line = f"ACCEPTANCE {k:2d} {'PASS' if ok else 'FAIL'}  {detail}"
        RESULTS[k] = line
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return _emit


@pytest.fixture(scope="module")
def market20():
    """N = 20, 20 trading days."""
    spec = SyntheticMarketSpec.random(20, 2, n_days=20, kappa=0.5, sigma=1e-3, factor_vol=2e-4, seed=11)
    panel = simulate_panel(spec)
    from esn_intraday.signals import build_signal_panel

    return panel, build_signal_panel(panel)


# --------------------------------------------------------------------------- 1


def test_01_ridge_oracle(emit):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        X = rng.standard_normal((50, 10)) * rng.uniform(0.2, 5, 10)
        y = X @ rng.standard_normal(10) + rng.standard_normal(50)
        n = len(y)
        for lam in 10.0 ** rng.uniform(-6, 2, 5):
            L = np.full(10, lam)
            fit = ridge_fit(TrainingBatch(X, y, np.arange(n), np.zeros(n, int), np.arange(n)), L)
            # independent oracle: augmented normal equations, intercept unpenalized
            A = np.block([[np.ones((1, 1)), X.mean(axis=0)[None]],
                          [X.mean(axis=0)[:, None], X.T @ X / n + np.diag(L)]])
            sol = np.linalg.solve(A, np.concatenate([[y.mean()], X.T @ y / n]))
            worst = max(worst, np.linalg.norm(fit.theta - sol[1:]) / np.linalg.norm(sol[1:]))
    secs = time.perf_counter() - t0
    emit(1, worst <= 1e-8 and secs < 5,
         f"ridge vs normal equations: max rel coef error {worst:.2e} (<= 1e-8), {secs:.2f}s (< 5s)")


# --------------------------------------------------------------------------- 2


def test_02_linear_reduction(emit, market20):
    panel, sig = market20
    t0 = time.perf_counter()
    D = sig.D
    spec = ReservoirSpec(K=D, D=D, alpha=0.0, rho=0.0, gamma=1.0, activation="identity")
    w = ReservoirWeights(np.zeros((D, D)), np.eye(D), np.zeros(D))
    worst, count = 0.0, 0
    for h in HORIZONS:
        cfg = HorizonConfig.default(h)
        a, b = run_esn(sig, panel, cfg, spec, weights=w), run_benchmark(sig, panel, cfg)
        same_cells = np.array_equal(np.isfinite(a.predictions), np.isfinite(b.predictions))
        worst = max(worst, np.nanmax(np.abs(a.predictions - b.predictions)) if same_cells else np.inf)
        count += a.n_predictions
    secs = time.perf_counter() - t0
    emit(2, worst <= 1e-10 and secs < 30,
         f"degenerate ESN vs benchmark, 5 horizons, {count} forecasts: max abs diff {worst:.1e} (<= 1e-10), "
         f"{secs:.1f}s (< 30s)")


# --------------------------------------------------------------------------- 3


def test_03_baseline_identity(emit, market20):
    panel, sig = market20
    worst, count = 0.0, 0
    for h in HORIZONS:
        cfg = HorizonConfig.default(h)
        a = run_baseline(sig, panel, cfg)
        b = run_benchmark(sig, panel, replace(cfg, window=1), zero_penalty=True)
        same_cells = np.array_equal(np.isfinite(a.predictions), np.isfinite(b.predictions))
        worst = max(worst, np.nanmax(np.abs(a.predictions - b.predictions)) if same_cells else np.inf)
        count += a.n_predictions
    emit(3, worst <= 1e-12, f"baseline vs benchmark(M=1, no penalty), {count} forecasts: max abs diff {worst:.1e} "
                            f"(<= 1e-12)")


# --------------------------------------------------------------------------- 4


def test_04_decay_bound(emit):
    specs = SearchSpace(budget=50, seed=4).sample()
    violations, checks = 0, 0
    for k, spec in enumerate(specs):
        w = sample_weights(spec)
        c = contraction_rate(w, spec)
        X0 = np.random.default_rng(k).uniform(-1, 1, spec.K)
        states, _ = run_state_sequence(w, spec, np.full((150, spec.D), np.nan), X0=X0)
        norms = np.linalg.norm(np.vstack([X0, states]), axis=1)
        n = np.arange(101)
        for t in (0, 10, 50):  # every start t and every n <= 100
            bound = c**n * norms[t] * (1 + 1e-12) + 1e-300
            violations += int(np.sum(norms[t : t + 101] > bound))
            checks += 101
    emit(4, violations == 0, f"50 random tanh specs, {checks} norm checks: {violations} violations (need 0)")


# --------------------------------------------------------------------------- 5


def test_05_echo_state_washout(emit):
    specs, k = [], 0
    for spec in SearchSpace(budget=200, seed=0).sample():
        if contraction_rate(sample_weights(spec), spec) < 1:
            specs.append(spec)
        if len(specs) == 20:
            break
    rng = np.random.default_rng(5)
    Z = rng.standard_normal((200, 6))
    failed = []
    for k, spec in enumerate(specs):
        w = sample_weights(spec)
        X0, X1 = rng.uniform(-1, 1, (2, spec.K))
        a, _ = run_state_sequence(w, spec, Z, X0=X0)
        b, _ = run_state_sequence(w, spec, Z, X0=X1)
        gap = np.linalg.norm(a[-1] - b[-1])
        if not gap < 1e-10:
            failed.append(f"alpha={spec.alpha} rho={spec.rho} gap={gap:.1e}")
    detail = "; ".join(failed) if failed else "all below 1e-10"
    emit(5, len(specs) == 20 and not failed,
         f"{len(specs)} grid specs with contraction bound < 1, 200 shared inputs: {len(failed)} violations "
         f"(need 0) [{detail}]")


# --------------------------------------------------------------------------- 6


def test_06_ou_recovery(emit):
    t0 = time.perf_counter()
    m, sigma = 1.0, 0.1
    worst, parts = 0.0, []
    for j, kappa in enumerate((0.05, 0.2, 1.0)):
        u = simulate_ou(kappa, m, sigma, 100_000, rng=100 + j)
        est = ou_estimate(u, P=0)
        errs = [abs(est.kappa / kappa - 1), abs(est.m / m - 1), abs(est.sigma / sigma - 1)]
        worst = max(worst, *errs)
        parts.append(f"kappa={kappa}: {max(errs):.3f}")
    secs = time.perf_counter() - t0
    emit(6, worst < 0.10 and secs < 10,
         f"OU recovery, T=1e5, worst rel error over kappa/m/sigma {worst:.3f} (< 0.10) [{', '.join(parts)}], "
         f"{secs:.2f}s (< 10s)")


# --------------------------------------------------------------------------- 7


def test_07_pca_sanity(emit):
    r = np.random.default_rng(7).standard_normal((195, 12))
    fac = extract_factors(standardize_returns(r), 12)
    resid = np.max(np.abs(factor_regression(r, fac.factor_returns).residuals))
    spec = SyntheticMarketSpec.random(100, 15, T=196, factor_vol=1e-3, sigma=1e-4, seed=7)
    fac15 = extract_factors(standardize_returns(simulate_panel(spec).values[1:]), 15)
    ev = float(fac15.explained_variance_ratio.sum())
    emit(7, resid <= 1e-8 and ev > 0.9,
         f"J=N residuals max {resid:.1e} (<= 1e-8); 15 true factors, J=15 explained variance {ev:.4f} (> 0.9)")


# --------------------------------------------------------------------------- 8


def test_08_schedule_counts(emit, market20):
    panel, sig = market20
    lay = panel.layout()
    day = lay.n_days - 1
    scheduled, emitted = [], []
    for h in HORIZONS:
        sched = Schedule(lay, HorizonConfig.default(h))
        fr = sched.forecast_rows()
        scheduled.append(int(np.sum(lay.day[fr] == day)))
        fs = run_baseline(sig, panel, HorizonConfig.default(h))
        emitted.append(int(np.sum(np.isfinite(fs.predictions).any(axis=1) & (lay.day == day))))
    want = [39, 37, 34, 28, 39]
    emit(8, scheduled == want and emitted == want,
         f"one full day: scheduled {scheduled}, emitted {emitted} (need {want})")


# --------------------------------------------------------------------------- 9


def test_09_no_lookahead(emit, market20):
    panel, sig = market20
    lay = panel.layout()
    violations, rows_checked, forecasts = 0, 0, 0
    for h in HORIZONS:
        cfg = HorizonConfig.default(h)
        sched = Schedule(lay, cfg)
        steps = sched.steps
        for fs in (run_baseline(sig, panel, cfg), run_benchmark(sig, panel, cfg),
                   run_esn(sig, panel, cfg, replace(RunConfig.from_dict({}, env={}).reservoir_spec(h)))):
            emitted = np.flatnonzero(np.isfinite(fs.predictions).any(axis=1))
            forecasts += int(np.isfinite(fs.predictions).sum())
            window_cfg = replace(cfg, window=1) if fs.model == "baseline" else cfg
            wsched = Schedule(lay, window_cfg)
            for t in emitted:
                s = wsched.window(t)
                # independent realization time: the close mark for EOD, s + h otherwise
                realized = np.array([np.flatnonzero((lay.day == lay.day[x]) & (lay.slot == lay.n_slots))[0]
                                     for x in s]) if steps is None else s + steps
                violations += int(np.sum(realized > t))
                rows_checked += len(s)
            violations += int(np.sum(fs.trained_through[emitted] > emitted))
    emit(9, violations == 0, f"{forecasts} forecasts, {rows_checked} training time slices audited: "
                             f"{violations} look-ahead violations (need 0)")


# --------------------------------------------------------------------------- 10


def test_10_dm_size(emit):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    reject = 0
    for _ in range(1000):
        d = rng.standard_normal(10_000)
        reject += diebold_mariano(d, np.zeros_like(d)).p_value < 0.05
    secs = time.perf_counter() - t0
    rate = reject / 1000
    emit(10, 0.035 <= rate <= 0.065 and secs < 60,
         f"DM rejection rate under the null {100 * rate:.1f}% (in [3.5%, 6.5%]), {secs:.1f}s (< 60s)")


# --------------------------------------------------------------------------- 11


def test_11_mcs(emit):
    eliminated = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a, b = rng.chisquare(3, 500), rng.chisquare(3, 500)
        worse = a + 0.1 * a.std()
        res = model_confidence_set({"a": a, "b": b, "worse": worse}, alpha=0.05, B=2000, seed=seed)
        eliminated += not res.included["worse"]
    x = np.random.default_rng(99).chisquare(3, 500)
    same = model_confidence_set({"m1": x, "m2": x.copy(), "m3": x.copy()}, B=2000)
    kept = all(same.included.values()) and all(p == 1.0 for p in same.p_values.values())
    emit(11, eliminated / 20 >= 0.99 and kept,
         f"shifted model eliminated in {eliminated}/20 runs (>= 99%); identical losses all retained with p=1: {kept}")


# --------------------------------------------------------------------------- 12-14

PIPELINE = {
    "seed": 7,
    "horizons": ["10min"],
    "models": ["baseline", "benchmark", "esn"],
    "data": {"source": "synthetic", "synthetic": {"N": 50, "J": 3, "n_days": 60, "kappa": 0.5}},
    "evaluation": {"start_day": 30, "mcs_draws": 2000},
    "tuning": {"budget": 12, "seed": 7},
}


def _pipeline(root):
    """simulate -> signals -> tune (days before the evaluation start) -> backtest -> evaluate."""
    root.mkdir(parents=True, exist_ok=True)
    conf = {**PIPELINE, "output": str(root / "run")}
    base = root / "run.json"
    base.write_text(json.dumps(conf))
    t0 = time.perf_counter()
    codes = [cli.main([c, "--config", str(base)]) for c in ("simulate", "signals", "tune")]
    tuned = root / "tuned_run.json"
    tuned.write_text(json.dumps({**conf, "fragments": ["run/tuning/tuned.json"]}))
    codes += [cli.main([c, "--config", str(tuned)]) for c in ("backtest", "evaluate", "report")]
    return codes, time.perf_counter() - t0, RunConfig.load(tuned, env={})


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    return root, _pipeline(root / "a"), _pipeline(root / "b")


def test_12_synthetic_end_to_end(emit, pipeline):
    root, (codes, secs, cfg), _ = pipeline
    out = root / "a" / "run"
    panel = load_panel(out)
    sets = {fs.model: fs for fs in load_forecasts(cfg, panel, out)}
    realized = horizon_targets(panel, "10min")
    start = evaluation_start(cfg, panel)
    mask = np.isfinite(realized) & (panel.times >= start)[:, None]
    for fs in sets.values():
        mask &= np.isfinite(fs.predictions)
    zero = msfe_series(np.zeros_like(realized), realized, mask).total
    msfe = {m: msfe_series(fs, realized, mask).total for m, fs in sets.items()}
    rel = {m: 100 * (v / zero - 1) for m, v in msfe.items()}
    ok = all(c == 0 for c in codes) and msfe["benchmark"] < zero and msfe["esn"] < zero and secs < 300
    tuned = cfg.reservoir_spec("10min")
    emit(12, ok,
         f"10min MSFE vs zero forecast on {int(mask.sum())} out-of-sample cells: benchmark {rel['benchmark']:+.2f}%, "
         f"esn {rel['esn']:+.2f}%, baseline {rel['baseline']:+.2f}% (benchmark and esn need < 0); "
         f"tuned alpha={tuned.alpha} rho={tuned.rho} gamma={tuned.gamma}; pipeline {secs:.0f}s (< 300s)")


def _without_seconds(path):
    """Trial log minus its wall-clock column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    k = rows[0].index("seconds")
    return [r[:k] + r[k + 1 :] for r in rows]


def test_13_determinism(emit, pipeline):
    root, (c1, _, _), (c2, _, _) = pipeline
    a, b = root / "a" / "run", root / "b" / "run"
    files = sorted(str(p.relative_to(a)) for d in ("forecasts", "evaluation", "tuning") for p in (a / d).iterdir())
    logs = [f for f in files if f.startswith("tuning/trials_")]
    exact = [f for f in files if f not in logs]
    same = [f for f in exact if (b / f).exists() and sha256_file(a / f) == sha256_file(b / f)]
    same_logs = [f for f in logs if (b / f).exists() and _without_seconds(a / f) == _without_seconds(b / f)]
    emit(13, all(c == 0 for c in c1 + c2) and len(same) == len(exact) and len(same_logs) == len(logs) and files,
         f"rerun with same config and seed: {len(same)}/{len(exact)} forecast, evaluation and tuned-spec files "
         f"byte-identical; {len(same_logs)}/{len(logs)} trial logs identical apart from wall-clock seconds")


def test_14_robustness_bands(emit, pipeline):
    root, (_, _, cfg), _ = pipeline
    out = root / "a" / "run"
    panel = load_panel(out)
    sig = load_or_build_signals(cfg, panel, out)
    t0 = time.perf_counter()
    res = robustness_study(cfg.reservoir_spec("10min"), 20, sig, panel, cfg.horizon_config("10min"))
    secs = time.perf_counter() - t0
    q = np.vstack([res.bands[p] for p in (5, 25, 50, 75, 95)])
    nested = bool(np.all(np.diff(q, axis=0) >= 0))
    finite = bool(np.all(np.isfinite(q)))
    emit(14, nested and finite and len(res.seeds) == 20,
         f"20 seeds x {q.shape[1]} events: bands nested 5<=25<=50<=75<=95 everywhere: {nested}; "
         f"terminal median {q[2, -1]:+.2f}%, 90% band [{q[0, -1]:+.2f}%, {q[4, -1]:+.2f}%] vs benchmark; {secs:.0f}s")

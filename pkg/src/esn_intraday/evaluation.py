"""Forecast accuracy metrics and comparative tests.

Everything here works on per-event losses: one cross-sectional mean squared
error per forecast timestamp.  Models are compared on the cells that every
model (and the realized target) covers, so no model is favoured by
abstaining.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .market_data import HORIZONS, ReturnPanel, horizon_targets
from .reservoir import ReservoirSpec
from .training import ForecastSet, HorizonConfig, run_benchmark, run_esn
from .signals import SignalPanel

BAND_PERCENTILES = (5, 25, 50, 75, 95)


class EvaluationError(ValueError):
    pass


def _pred_array(f) -> np.ndarray:
    return f.predictions if isinstance(f, ForecastSet) else np.asarray(f, float)


@dataclass
class MsfeSeries:
    rows: np.ndarray  # grid rows of the events
    n_stocks: np.ndarray
    msfe: np.ndarray
    cumsfe: np.ndarray

    @property
    def total(self) -> float:
        return float(self.cumsfe[-1])


def msfe_series(forecasts, realized: np.ndarray, mask: np.ndarray | None = None) -> MsfeSeries:
    """Per-event cross-sectional MSFE and its running mean.

    Cells enter when both the forecast and the realized value are finite (and
    ``mask`` allows them); events without any such cell are skipped.
    """
    pred = _pred_array(forecasts)
    realized = np.asarray(realized, float)
    if pred.shape != realized.shape:
        raise EvaluationError(f"forecast shape {pred.shape} != realized shape {realized.shape}")
    ok = np.isfinite(pred) & np.isfinite(realized)
    if mask is not None:
        ok &= mask
    n = ok.sum(axis=1)
    rows = np.flatnonzero(n > 0)
    if rows.size == 0:
        raise EvaluationError("forecasts and realized returns share no cells")
    err2 = np.where(ok, (np.where(ok, realized, 0.0) - np.where(ok, pred, 0.0)) ** 2, 0.0)
    msfe = err2[rows].sum(axis=1) / n[rows]
    cum = np.cumsum(msfe) / np.arange(1, len(msfe) + 1)
    return MsfeSeries(rows, n[rows], msfe, cum)


def pooled_r2(forecasts, realized: np.ndarray, mask: np.ndarray | None = None, benchmark: str = "zero") -> float:
    """Out-of-sample R^2 pooled over all cells.

    ``benchmark="zero"`` compares with the zero forecast (uncentered);
    ``"mean"`` with each event's cross-sectional mean return.  Returns NaN
    when the benchmark error is zero.
    """
    pred = _pred_array(forecasts)
    realized = np.asarray(realized, float)
    ok = np.isfinite(pred) & np.isfinite(realized)
    if mask is not None:
        ok &= mask
    if not ok.any():
        raise EvaluationError("forecasts and realized returns share no cells")
    r = np.where(ok, realized, 0.0)
    sse = np.sum(np.where(ok, (r - np.where(ok, pred, 0.0)) ** 2, 0.0))
    if benchmark == "zero":
        ref = np.sum(r**2)
    elif benchmark == "mean":
        n = ok.sum(axis=1, keepdims=True)
        mean = np.divide(r.sum(axis=1, keepdims=True), n, out=np.zeros_like(n, dtype=float), where=n > 0)
        ref = np.sum(np.where(ok, (r - mean) ** 2, 0.0))
    else:
        raise ValueError(f"unknown R^2 benchmark {benchmark!r}")
    return float("nan") if ref == 0 else float(1.0 - sse / ref)


@dataclass(frozen=True)
class DMResult:
    statistic: float
    p_value: float
    note: str = ""


def bartlett_lrv(d: np.ndarray, lags: int) -> float:
    """Long-run variance of ``d`` with Bartlett weights ``1 - k/(lags+1)``."""
    d = np.asarray(d, float) - np.mean(d)
    T = len(d)
    lrv = d @ d / T
    for k in range(1, min(lags, T - 1) + 1):
        lrv += 2.0 * (1.0 - k / (lags + 1)) * (d[k:] @ d[:-k]) / T
    return float(lrv)


def diebold_mariano(loss_a, loss_b, h_overlap: int = 1) -> DMResult:
    """Equal predictive accuracy test on ``d = loss_a - loss_b``.

    Positive statistics mean ``a`` has the larger loss.  Uses ``h_overlap-1``
    Bartlett lags, the Harvey-Leybourne-Newbold small-sample factor and a
    two-sided t(T-1) p-value.
    """
    a = np.asarray(loss_a, float)
    b = np.asarray(loss_b, float)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise EvaluationError("loss series must be one-dimensional, equal-length and nonempty")
    if h_overlap < 1:
        raise ValueError("h_overlap must be at least 1")
    d = a - b
    T = len(d)
    mean = float(np.mean(d))
    if not np.any(d):
        return DMResult(float("nan"), float("nan"), "equal by construction")
    lrv = bartlett_lrv(d, h_overlap - 1)
    # rounding noise in a constant differential is not variance
    tiny = (64 * np.finfo(float).eps * float(np.max(np.abs(d)))) ** 2
    if not lrv > tiny or T < 2:
        # constant non-zero differential: dominance is certain in sign
        return DMResult(math.copysign(math.inf, mean), 0.0, "zero variance: sign-only dominance")
    h = h_overlap
    hln = math.sqrt(max((T + 1 - 2 * h + h * (h - 1) / T) / T, 0.0))
    dm = hln * mean / math.sqrt(lrv / T)
    return DMResult(float(dm), float(2.0 * stats.t.sf(abs(dm), T - 1)))


def stationary_bootstrap_indices(T: int, B: int, block: float, rng: np.random.Generator) -> np.ndarray:
    """B x T index paths with geometric block lengths of mean ``block``."""
    start = rng.integers(0, T, size=(B, T))
    new_block = rng.random((B, T)) < 1.0 / block
    new_block[:, 0] = True
    # position inside the current block
    pos = np.arange(T)[None, :]
    last_start = np.maximum.accumulate(np.where(new_block, pos, 0), axis=1)
    origin = np.take_along_axis(start, last_start, axis=1)
    return (origin + pos - last_start) % T


@dataclass
class MCSResult:
    models: list[str]
    included: dict[str, bool]
    p_values: dict[str, float]
    elimination_order: list[str]
    alpha: float
    B: int
    block_length: int


def _range_stage(mean: np.ndarray, boot: np.ndarray, alive: np.ndarray):
    """Range statistic, its bootstrap p-value and the worst model."""
    idx = np.flatnonzero(alive)
    m = mean[idx]
    bm = boot[:, idx]
    dbar = m[:, None] - m[None, :]
    dboot = bm[:, :, None] - bm[:, None, :] - dbar[None]
    var = np.mean(dboot**2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(var > 0, dbar / np.sqrt(np.where(var > 0, var, 1.0)),
                     np.where(dbar > 0, np.inf, np.where(dbar < 0, -np.inf, 0.0)))
        tboot = np.where(var > 0, np.abs(dboot) / np.sqrt(np.where(var > 0, var, 1.0)), 0.0)
    stat = float(np.max(np.abs(t)))
    p = float(np.mean(tboot.reshape(len(tboot), -1).max(axis=1) >= stat)) if np.isfinite(stat) else 0.0
    return stat, p, idx, t.max(axis=1)


def model_confidence_set(losses: dict[str, np.ndarray], alpha: float = 0.05, B: int = 10_000, seed: int = 0,
                         block_length: int | None = None) -> MCSResult:
    """Model confidence set with the range statistic and a stationary bootstrap."""
    names = sorted(losses)
    if len(names) < 2:
        raise EvaluationError("the model confidence set needs at least two models")
    L = np.column_stack([np.asarray(losses[n], float) for n in names])
    T = L.shape[0]
    if T == 0 or not np.all(np.isfinite(L)):
        raise EvaluationError("loss series must be finite and nonempty")
    block = block_length or int(math.ceil(T ** (1.0 / 3.0)))
    rng = np.random.default_rng(seed)
    mean = L.mean(axis=0)
    boot = np.empty((B, L.shape[1]))
    chunk = max(1, 2_000_000 // T)
    for lo in range(0, B, chunk):
        idx = stationary_bootstrap_indices(T, min(chunk, B - lo), block, rng)
        boot[lo : lo + len(idx)] = L[idx].mean(axis=1)
    alive = np.ones(len(names), bool)
    order, pvals = [], {}
    running = 0.0
    while alive.sum() > 1:
        _, p, idx, score = _range_stage(mean, boot, alive)
        running = max(running, p)
        # ties broken on the mean loss, then the name, so input order is irrelevant
        key = [(-score[k], -mean[i], names[i]) for k, i in enumerate(idx)]
        worst = idx[min(range(len(idx)), key=lambda k: key[k])]
        alive[worst] = False
        order.append(names[worst])
        pvals[names[worst]] = running
    last = names[int(np.flatnonzero(alive)[0])]
    order.append(last)
    pvals[last] = 1.0
    included = {n: bool(pvals[n] >= alpha) for n in names}
    return MCSResult(names, included, pvals, order, alpha, B, block)


# ---------------------------------------------------------------- robustness


@dataclass
class RobustnessResult:
    seeds: list[int]
    rows: np.ndarray
    curves: np.ndarray  # n_models x events, relative cuMSFE in percent
    bands: dict[int, np.ndarray]

    def band(self, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
        return self.bands[lo], self.bands[hi]


def quantile_bands(curves: np.ndarray, percentiles=BAND_PERCENTILES) -> dict[int, np.ndarray]:
    curves = np.atleast_2d(np.asarray(curves, float))
    q = np.percentile(curves, percentiles, axis=0)
    # percentile interpolation is monotone in q, but guard against rounding
    q = np.maximum.accumulate(q, axis=0)
    return {int(p): q[k] for k, p in enumerate(percentiles)}


def robustness_study(base_spec: ReservoirSpec, n_models: int, signals: SignalPanel, panel: ReturnPanel,
                     cfg: HorizonConfig, reference: ForecastSet | None = None, mapper=map, **kw) -> RobustnessResult:
    """Re-run the ESN with seeds ``seed+1 .. seed+n_models`` and band the
    relative cuMSFE (percent, against ``reference``, default the benchmark)."""
    if n_models < 1:
        raise ValueError("n_models must be positive")
    realized = horizon_targets(panel, cfg.horizon)
    if reference is None:
        reference = run_benchmark(signals, panel, cfg, **kw)
    seeds = [base_spec.seed + k for k in range(1, n_models + 1)]
    runs = list(mapper(_EsnRun(signals, panel, cfg, base_spec, kw), seeds))
    mask = np.isfinite(realized) & np.isfinite(reference.predictions)
    for f in runs:
        mask &= np.isfinite(f.predictions)
    ref = msfe_series(reference, realized, mask)
    curves = np.vstack([100.0 * (msfe_series(f, realized, mask).cumsfe / ref.cumsfe - 1.0) for f in runs])
    return RobustnessResult(seeds, ref.rows, curves, quantile_bands(curves))


@dataclass
class _EsnRun:
    signals: SignalPanel
    panel: ReturnPanel
    cfg: HorizonConfig
    spec: ReservoirSpec
    kw: dict

    def __call__(self, seed: int) -> ForecastSet:
        return run_esn(self.signals, self.panel, self.cfg, self.spec.with_seed(seed), **self.kw)


# -------------------------------------------------------------------- report


def format_reduction(pct: float) -> str:
    return "[n/a]" if not np.isfinite(pct) else f"[{pct:.4f}%]"


def overlap_steps(horizon: str, n_slots: int = 39) -> int:
    """Forecast overlap in events; EOD forecasts within a day share a target."""
    steps = HORIZONS[horizon]
    return n_slots if steps is None else steps


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class HorizonReport:
    horizon: str
    models: list[str]
    times: np.ndarray  # event timestamps
    n_cells: int
    coverage: dict[str, int]
    msfe: dict[str, float]
    cumsfe: dict[str, np.ndarray]
    relative_pct: dict[str, float]
    r2_zero: dict[str, float]
    r2_mean: dict[str, float]
    dm: dict[tuple[str, str], DMResult] = field(default_factory=dict)
    mcs: MCSResult | None = None


@dataclass
class EvaluationReport:
    baseline: str
    horizons: dict[str, HorizonReport]
    mcs_alpha: float
    mcs_draws: int
    seed: int

    def to_dict(self) -> dict:
        out = {"baseline": self.baseline, "mcs_alpha": self.mcs_alpha, "mcs_draws": self.mcs_draws,
               "seed": self.seed, "horizons": {}}
        for h, r in self.horizons.items():
            d = {
                "models": r.models,
                "events": len(r.times),
                "cells": r.n_cells,
                "coverage": r.coverage,
                "msfe": r.msfe,
                "relative_reduction_pct": r.relative_pct,
                "relative_reduction": {m: format_reduction(v) for m, v in r.relative_pct.items()},
                "r2_zero_benchmark": r.r2_zero,
                "r2_mean_benchmark": r.r2_mean,
            }
            if r.dm:
                d["diebold_mariano"] = [
                    {"model_a": a, "model_b": b, "statistic": v.statistic, "p_value": v.p_value, "note": v.note}
                    for (a, b), v in r.dm.items()
                ]
            if r.mcs is not None:
                d["model_confidence_set"] = {
                    "included": r.mcs.included,
                    "p_values": r.mcs.p_values,
                    "elimination_order": r.mcs.elimination_order,
                    "block_length": r.mcs.block_length,
                }
            out["horizons"][h] = d
        return _clean(out)

    def write(self, out_dir) -> list[Path]:
        """JSON report, flat CSV tables and per-horizon plot data."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        p = out / "report.json"
        p.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
        paths.append(p)
        models = sorted({m for r in self.horizons.values() for m in r.models})
        hs = list(self.horizons)

        def table(name, header, rows):
            path = out / name
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
            paths.append(path)

        table("msfe.csv", ["horizon", *models],
              [[h, *(f"{self.horizons[h].msfe[m]:.6e} {format_reduction(self.horizons[h].relative_pct[m])}"
                     if m in self.horizons[h].msfe else "" for m in models)] for h in hs])
        table("r2.csv", ["horizon", "model", "r2_zero_benchmark", "r2_mean_benchmark"],
              [[h, m, repr(self.horizons[h].r2_zero[m]), repr(self.horizons[h].r2_mean[m])]
               for h in hs for m in self.horizons[h].models])
        dm_rows = [[h, a, b, repr(v.statistic), repr(v.p_value), v.note]
                   for h in hs for (a, b), v in self.horizons[h].dm.items()]
        if dm_rows:
            table("dm.csv", ["horizon", "model_a", "model_b", "statistic", "p_value", "note"], dm_rows)
        mcs_rows = [[h, m, int(r.mcs.included[m]), f"{r.mcs.p_values[m]:.4f}"]
                    for h, r in self.horizons.items() if r.mcs is not None for m in r.models]
        if mcs_rows:
            table("mcs.csv", ["horizon", "model", "included", "p_value"], mcs_rows)
        for h, r in self.horizons.items():
            base = r.cumsfe.get(self.baseline)
            others = [m for m in r.models if m != self.baseline] if base is not None else []
            rows = [[str(r.times[k]), *(repr(float(100.0 * (r.cumsfe[m][k] / base[k] - 1.0))) for m in others)]
                    for k in range(len(r.times))] if others else []
            table(f"plot_{h}.csv", ["time", *others], rows)
        return paths


def evaluate_horizon(forecasts: dict[str, ForecastSet], realized: np.ndarray, times, horizon: str,
                     baseline: str = "baseline", mcs_alpha: float = 0.05, mcs_draws: int = 10_000,
                     seed: int = 0, n_slots: int = 39) -> HorizonReport:
    models = sorted(forecasts)
    if not models:
        raise EvaluationError(f"no forecasts for horizon {horizon}")
    for m, f in forecasts.items():
        if f.horizon != horizon:
            raise EvaluationError(f"forecast set {m} is for horizon {f.horizon}, not {horizon}")
        if _pred_array(f).shape != realized.shape:
            raise EvaluationError(f"forecast set {m} does not match the realized panel")
    mask = np.isfinite(realized)
    for f in forecasts.values():
        mask &= np.isfinite(_pred_array(f))
    series = {m: msfe_series(forecasts[m], realized, mask) for m in models}
    rows = series[models[0]].rows
    base = series[baseline].total if baseline in series else float("nan")
    rep = HorizonReport(
        horizon=horizon,
        models=models,
        times=np.asarray(times)[rows],
        n_cells=int(mask.sum()),
        coverage={m: forecasts[m].n_predictions if isinstance(forecasts[m], ForecastSet)
                  else int(np.isfinite(_pred_array(forecasts[m])).sum()) for m in models},
        msfe={m: series[m].total for m in models},
        cumsfe={m: series[m].cumsfe for m in models},
        relative_pct={m: 100.0 * (series[m].total / base - 1.0) for m in models},
        r2_zero={m: pooled_r2(forecasts[m], realized, mask, "zero") for m in models},
        r2_mean={m: pooled_r2(forecasts[m], realized, mask, "mean") for m in models},
    )
    if len(models) > 1:
        lag = overlap_steps(horizon, n_slots)
        for i, a in enumerate(models):
            for b in models[i + 1 :]:
                rep.dm[(a, b)] = diebold_mariano(series[a].msfe, series[b].msfe, lag)
        rep.mcs = model_confidence_set({m: series[m].msfe for m in models}, mcs_alpha, mcs_draws, seed)
    return rep


def evaluate(forecasts: list[ForecastSet], panel: ReturnPanel, baseline: str = "baseline", mcs_alpha: float = 0.05,
             mcs_draws: int = 10_000, seed: int = 0, eval_from=None) -> EvaluationReport:
    """Evaluate every (model, horizon) forecast set against ``panel``.

    ``eval_from`` (a timestamp) restricts scoring to events at or after it.
    """
    by_h: dict[str, dict[str, ForecastSet]] = {}
    for f in forecasts:
        if f.model in by_h.setdefault(f.horizon, {}):
            raise EvaluationError(f"duplicate forecast set for ({f.model}, {f.horizon})")
        by_h[f.horizon][f.model] = f
    model_sets = {frozenset(v) for v in by_h.values()}
    if len(model_sets) > 1:
        raise EvaluationError("model lists differ across horizons")
    n_slots = panel.layout().n_slots
    out = {}
    for h in [h for h in HORIZONS if h in by_h]:
        realized = horizon_targets(panel, h)
        if eval_from is not None:
            realized = np.where((panel.times >= np.datetime64(eval_from, "m"))[:, None], realized, np.nan)
        out[h] = evaluate_horizon(by_h[h], realized, panel.times, h, baseline, mcs_alpha, mcs_draws, seed, n_slots)
    return EvaluationReport(baseline, out, mcs_alpha, mcs_draws, seed)

"""Rolling-window readout estimation for the baseline, benchmark and ESN models.

All three share one code path: at every prediction time ``t`` a pooled
(time x stock) batch from the window ``[t - buffer - window, t - buffer - 1]``
(in prediction-slot units) is fitted by ridge regression with an unpenalized
intercept, and the fit is applied to the features observed at ``t``.  The EOD
window is day-aligned and always ends at a previous day's close.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .market_data import HORIZONS, GridLayout, ReturnPanel, TradingCalendar, horizon_steps, horizon_targets
from .reservoir import ReservoirSpec, ReservoirWeights, run_state_sequence, sample_weights
from .signals import SignalPanel

logger = logging.getLogger(__name__)

LAMBDA_GRID = np.logspace(-8, 2, 21)
STEPS_PER_DAY = 39


class SkipPrediction(Exception):
    """No usable fit for this (t, h); recorded rather than raised to the caller."""


def parse_steps(value, steps_per_day: int = STEPS_PER_DAY) -> int:
    """Duration -> 10-minute grid steps: 30, "30min", "1hr", "2 hours", "1day"."""
    if isinstance(value, (int, np.integer)):
        return int(value)
    m = re.fullmatch(r"\s*(\d+)\s*(min|mins|minute|minutes|m|hr|hrs|hour|hours|h|day|days|d)?\s*", str(value))
    if not m:
        raise ValueError(f"cannot parse duration {value!r}")
    n, unit = int(m.group(1)), (m.group(2) or "steps")
    if unit.startswith(("min", "m")):
        if n % 10:
            raise ValueError(f"{value!r} is not a multiple of 10 minutes")
        return n // 10
    if unit.startswith("h"):
        return 6 * n
    if unit.startswith("d"):
        return steps_per_day * n
    return n


def parse_days(value) -> int:
    if isinstance(value, (int, np.integer)):
        return int(value)
    m = re.fullmatch(r"\s*(\d+)\s*(day|days|d|week|weeks|w)\s*", str(value))
    if not m:
        raise ValueError(f"cannot parse day count {value!r}")
    return int(m.group(1)) * (5 if m.group(2).startswith("w") else 1)


# (window, buffer) per horizon, from the training-parameter table
HORIZON_WINDOWS = {
    "10min": ("30min", "10min"),
    "30min": ("30min", "30min"),
    "60min": ("1hr", "1hr"),
    "2hr": ("1hr", "2hr"),
    "EOD": ("1day", "1day"),
}


@dataclass(frozen=True)
class HorizonConfig:
    horizon: str
    window: int  # M_t, grid steps
    buffer: int  # tau_h, grid steps
    cv_frequency: int = 1  # days
    cv_window: int = 5  # days
    cv_split: float = 0.7

    def __post_init__(self):
        need = horizon_steps(self.horizon)
        if self.buffer < need:
            raise ValueError(f"buffer {self.buffer} < horizon {self.horizon} ({need} steps) leaks information")
        if self.window < 1:
            raise ValueError("window must be at least one step")
        if not 0 < self.cv_split < 1:
            raise ValueError("cv_split must lie in (0, 1)")
        if self.cv_frequency != 1:
            raise ValueError("only daily cross-validation is supported")

    @classmethod
    def default(cls, horizon: str) -> "HorizonConfig":
        w, b = HORIZON_WINDOWS[horizon]
        return cls(horizon, parse_steps(w), parse_steps(b))

    @classmethod
    def from_dict(cls, horizon: str, d: dict | None) -> "HorizonConfig":
        base = cls.default(horizon)
        d = dict(d or {})
        return cls(
            horizon,
            parse_steps(d.get("window", base.window)),
            parse_steps(d.get("buffer", base.buffer)),
            parse_days(d.get("cv_frequency", base.cv_frequency)),
            parse_days(d.get("cv_window", base.cv_window)),
            float(d.get("cv_split", base.cv_split)),
        )

    @property
    def is_eod(self) -> bool:
        return HORIZONS[self.horizon] is None


@dataclass
class ReadoutCoefficients:
    mu: float
    theta: np.ndarray
    fitted_at: object = None
    horizon: str | None = None
    lambda_selected: float = 0.0
    singular: bool = False

    def __post_init__(self):
        self.theta = np.asarray(self.theta, float)
        if not (np.isfinite(self.mu) and np.all(np.isfinite(self.theta))):
            raise ValueError("non-finite readout coefficients")


@dataclass
class TrainingBatch:
    X: np.ndarray
    y: np.ndarray
    rows: np.ndarray  # time row s of each observation
    stocks: np.ndarray
    target_rows: np.ndarray  # row at which each target is fully realized

    def __len__(self) -> int:
        return len(self.y)


def solve_ridge(X: np.ndarray, y: np.ndarray, penalty) -> tuple[float, np.ndarray, bool]:
    """argmin (1/n)||y - mu - X theta||^2 + theta' diag(penalty) theta.

    Returns ``(mu, theta, singular)``; singular systems get the minimum-norm
    solution.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n, k = X.shape
    if n == 0:
        raise SkipPrediction("empty batch")
    pen = np.broadcast_to(np.asarray(penalty, float), (k,))
    if np.any(pen < 0):
        raise ValueError("penalty entries must be non-negative")
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    singular = False
    if not np.any(pen > 0):
        theta, _, rank, _ = np.linalg.lstsq(Xc, yc, rcond=None)
        singular = rank < k
    else:
        G = Xc.T @ Xc / n + np.diag(pen)
        b = Xc.T @ yc / n
        try:
            c = scipy.linalg.cho_factor(G)
            theta = scipy.linalg.cho_solve(c, b)
        except np.linalg.LinAlgError:
            theta = np.linalg.lstsq(G, b, rcond=None)[0]
            singular = True
    return float(ym - xm @ theta), theta, singular


def ridge_fit(batch: TrainingBatch, Lambda, fitted_at=None, horizon=None, lambda_selected: float = float("nan")) -> ReadoutCoefficients:
    """Ridge readout; ``Lambda`` is the diagonal (vector) or a diagonal matrix."""
    L = np.asarray(Lambda, float)
    if L.ndim == 2:
        if np.any(L - np.diag(np.diag(L))):
            raise ValueError("Lambda must be diagonal")
        L = np.diag(L)
    mu, theta, singular = solve_ridge(batch.X, batch.y, L)
    return ReadoutCoefficients(mu, theta, fitted_at, horizon, lambda_selected, singular)


def predict(coeffs: ReadoutCoefficients, x) -> np.ndarray | float:
    """mu + theta'x; rows of ``x`` containing NaN give NaN."""
    x = np.asarray(x, float)
    out = coeffs.mu + x @ coeffs.theta
    if x.ndim == 1:
        return float("nan") if np.any(np.isnan(x)) else float(out)
    return np.where(np.isnan(x).any(axis=1), np.nan, out)


class Schedule:
    """Training-window arithmetic on a panel's grid."""

    def __init__(self, layout: GridLayout, cfg: HorizonConfig, washout_days: int = 1):
        self.layout = layout
        self.cfg = cfg
        self.pred_rows = np.flatnonzero(layout.is_prediction)
        self.g_of_row = np.full(len(layout.day), -1, dtype=np.int64)
        self.g_of_row[self.pred_rows] = np.arange(len(self.pred_rows))
        self.washout_days = washout_days
        self.close_row = layout.close_row_of()
        self.steps = HORIZONS[cfg.horizon]
        self.fc_rows = self.forecast_rows()

    def forecast_rows(self) -> np.ndarray:
        """Rows with a defined h-ahead target (39/37/34/28/39 per full day)."""
        lay = self.layout
        ok = lay.is_prediction.copy()
        if self.steps is not None:
            ok &= lay.slot + self.steps <= lay.n_slots
        return np.flatnonzero(ok)

    def target_row(self, s: np.ndarray) -> np.ndarray:
        """Row at which the target of row ``s`` is fully realized."""
        s = np.asarray(s)
        if self.steps is None:
            return self.close_row[s]
        return s + self.steps

    def window(self, t: int) -> np.ndarray:
        """Training rows for a forecast at row ``t``.

        The window holds the ``cfg.window`` latest forecast times at or before
        ``t - buffer - 1``; times whose target would run past the close are
        passed over, so a morning forecast still sees a full window.
        """
        g = self.g_of_row[t]
        if g < 0:
            raise SkipPrediction("not a prediction slot")
        cfg = self.cfg
        lay = self.layout
        if cfg.is_eod:
            back_days = -(-cfg.buffer // lay.n_slots)
            limit_day = lay.day[t] - back_days
            last = np.searchsorted(lay.day[self.fc_rows], limit_day, side="right") - 1
        else:
            end_g = int(g) - cfg.buffer - 1
            if end_g < 0:
                raise SkipPrediction("insufficient history")
            last = np.searchsorted(self.fc_rows, self.pred_rows[end_g], side="right") - 1
        first = last - cfg.window + 1
        if first < 0 or lay.day[self.fc_rows[first]] < self.washout_days:
            raise SkipPrediction("insufficient history")
        return self.fc_rows[first : last + 1]


def assemble_batch(features: np.ndarray, valid: np.ndarray, targets: np.ndarray, rows: np.ndarray,
                   schedule: Schedule) -> TrainingBatch:
    """Pool (s, i) observations over ``rows``; drop missing features/targets."""
    f = features[rows]
    y = targets[rows]
    ok = valid[rows] & np.isfinite(y)
    si, ii = np.nonzero(ok)
    if si.size == 0:
        raise SkipPrediction("empty batch")
    s = rows[si]
    return TrainingBatch(f[si, ii], y[si, ii], s, ii, schedule.target_row(s))


@dataclass
class PenaltyChoice:
    lam: float
    diag: np.ndarray
    val_mse: np.ndarray
    last_target_row: int
    n_train_times: int = 0
    n_val_times: int = 0
    val_start: int = -1
    reused: bool = False


def _cv_sample(features, valid, targets, schedule: Schedule, day: int):
    cfg = schedule.cfg
    lay = schedule.layout
    if day - cfg.cv_window < schedule.washout_days:
        raise SkipPrediction("less than one CV window of history")
    fr = schedule.forecast_rows()
    rows = fr[(lay.day[fr] >= day - cfg.cv_window) & (lay.day[fr] < day)]
    batch = assemble_batch(features, valid, targets, rows, schedule)
    times = np.unique(batch.rows)
    k = int(np.floor(cfg.cv_split * len(times)))
    if k < 1 or k >= len(times):
        raise SkipPrediction("empty CV split")
    return batch, times[:k], times[k:]


def _choose(lambda_grid, v, sse, count, batch, n_tr, n_va, val_start, last_row):
    if count == 0:
        raise SkipPrediction("empty CV split")
    mse = sse / count
    best = int(np.argmin(mse))
    return PenaltyChoice(float(lambda_grid[best]), lambda_grid[best] * v, mse, last_row, n_tr, n_va, int(val_start))


def cross_validate_penalty(features: np.ndarray, valid: np.ndarray, targets: np.ndarray, schedule: Schedule,
                           day: int, lambda_grid=LAMBDA_GRID, scheme: str = "rolling") -> PenaltyChoice:
    """Pick the ridge scale on the trailing ``cv_window`` days before ``day``.

    Forecast times in the window are split chronologically (``cv_split`` of
    them first).  The penalty is ``lambda * diag(v)`` with ``v`` the
    per-coordinate second moment of the design on the first part.

    ``scheme="rolling"`` scores every validation time with the same rolling
    window fit used live; ``scheme="pooled"`` fits once on the pooled first
    part, purging observations whose targets realize inside the validation
    span.
    """
    batch, tr_times, va_times = _cv_sample(features, valid, targets, schedule, day)
    grid = np.asarray(lambda_grid, float)
    tr = batch.rows < va_times[0]
    v = np.mean(batch.X[tr] ** 2, axis=0)
    v = np.where(v > 0, v, 1.0)
    sse = np.zeros(len(grid))
    count = 0
    if scheme == "pooled":
        tr &= batch.target_rows <= va_times[0]
        va = batch.rows >= va_times[0]
        if tr.sum() < 2 or va.sum() < 1:
            raise SkipPrediction("empty CV split")
        for j, lam in enumerate(grid):
            mu, theta, _ = solve_ridge(batch.X[tr], batch.y[tr], lam * v)
            sse[j] = np.sum((batch.y[va] - mu - batch.X[va] @ theta) ** 2)
        return _choose(grid, v, sse, int(va.sum()), batch, len(tr_times), len(va_times), va_times[0],
                       int(batch.target_rows.max()))
    if scheme != "rolling":
        raise ValueError(f"unknown CV scheme {scheme!r}")
    root = np.sqrt(v)
    last_row = -1
    fits: dict = {}
    for t in va_times:
        try:
            rows = schedule.window(t)
        except SkipPrediction:
            continue
        key = (rows[0], rows[-1])
        if key not in fits:
            try:
                wb = assemble_batch(features, valid, targets, rows, schedule)
            except SkipPrediction:
                fits[key] = None
                continue
            if len(wb) < 2:
                fits[key] = None
                continue
            Xs = wb.X / root
            xm, ym = Xs.mean(axis=0), wb.y.mean()
            Xc = Xs - xm
            w, U = np.linalg.eigh(Xc.T @ Xc / len(wb))
            bt = U.T @ (Xc.T @ (wb.y - ym) / len(wb))
            # scaled-coordinate solutions for every lambda at once
            thetas = U @ (bt[:, None] / (np.maximum(w, 0.0)[:, None] + grid[None, :]))
            fits[key] = (ym - xm @ thetas, thetas, int(wb.target_rows.max()))
        if fits[key] is None:
            continue
        mus, thetas, seen = fits[key]
        sel = batch.rows == t
        pred = mus[None, :] + (batch.X[sel] / root) @ thetas
        sse += np.sum((batch.y[sel][:, None] - pred) ** 2, axis=0)
        count += int(sel.sum())
        last_row = max(last_row, seen, int(schedule.target_row(np.array([t]))[0]))
    return _choose(grid, v, sse, count, batch, len(tr_times), len(va_times), va_times[0], last_row)


@dataclass
class ForecastSet:
    """Predictions for one (model, horizon) on a panel's grid (NaN = none)."""

    model: str
    horizon: str
    times: np.ndarray
    tickers: list[str]
    predictions: np.ndarray
    lambdas: np.ndarray
    trained_through: np.ndarray  # latest target-realization row used for each t (-1: none)
    skipped: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype="datetime64[m]")
        p = np.asarray(self.predictions, float)
        if p.shape != (len(self.times), len(self.tickers)):
            raise ValueError("prediction array does not match times x tickers")
        self.predictions = p

    @property
    def n_predictions(self) -> int:
        return int(np.isfinite(self.predictions).sum())

    def records(self):
        rows, cols = np.nonzero(np.isfinite(self.predictions))
        for r, c in zip(rows, cols):
            yield (str(self.times[r]), self.horizon, self.tickers[c], float(self.predictions[r, c]), self.model,
                   float(self.lambdas[r]))


FORECAST_HEADER = ("timestamp", "horizon", "ticker", "prediction", "model", "lambda_selected")


def write_forecasts(fs: ForecastSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FORECAST_HEADER)
        for ts, h, tic, pred, model, lam in fs.records():
            w.writerow([ts, h, tic, repr(pred), model, repr(lam)])


def read_forecasts(path, times, tickers) -> ForecastSet:
    times = np.asarray(times, dtype="datetime64[m]")
    col = {t: j for j, t in enumerate(tickers)}
    pred = np.full((len(times), len(tickers)), np.nan)
    lam = np.full(len(times), np.nan)
    model = horizon = None
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != FORECAST_HEADER:
            raise ValueError(f"{path}: unexpected forecast header {header}")
        for ts, h, tic, p, m, lm in r:
            row = np.searchsorted(times, np.datetime64(ts, "m"))
            if row >= len(times) or times[row] != np.datetime64(ts, "m"):
                raise ValueError(f"{path}: timestamp {ts} not on the panel grid")
            pred[row, col[tic]] = float(p)
            lam[row] = float(lm)
            model, horizon = m, h
    if model is None:
        raise ValueError(f"{path}: no forecasts")
    return ForecastSet(model, horizon, times, list(tickers), pred, lam, np.full(len(times), -1))


def run_readout(features: np.ndarray, valid: np.ndarray, panel: ReturnPanel, cfg: HorizonConfig, *,
                model: str, penalty: str = "cv", washout_days: int = 1, lambda_grid=LAMBDA_GRID,
                cv_scheme: str = "rolling", calendar: TradingCalendar | None = None, targets: np.ndarray | None = None) -> ForecastSet:
    """Walk forward over the grid; ``penalty`` is "cv" (daily CV) or "zero" (OLS)."""
    if penalty not in ("cv", "zero"):
        raise ValueError("penalty must be 'cv' or 'zero'")
    lay = panel.layout(calendar)
    sched = Schedule(lay, cfg, washout_days)
    if targets is None:
        targets = horizon_targets(panel, cfg.horizon, calendar)
    T, N = panel.shape
    F = features.shape[2]
    min_rows = F + 1 if penalty == "zero" else 2
    preds = np.full((T, N), np.nan)
    lambdas = np.full(T, np.nan)
    trained = np.full(T, -1, dtype=np.int64)
    skipped: dict[str, int] = {}
    day_pen: dict[int, PenaltyChoice | None] = {}
    last_pen: PenaltyChoice | None = None
    cache: dict = {}

    def skip(reason):
        skipped[reason] = skipped.get(reason, 0) + 1

    for t in sched.forecast_rows():
        d = int(lay.day[t])
        pen_diag = np.zeros(F)
        lam = 0.0
        cv_seen = -1
        if penalty == "cv":
            if d not in day_pen:
                try:
                    last_pen = cross_validate_penalty(features, valid, targets, sched, d, lambda_grid, cv_scheme)
                except SkipPrediction as exc:
                    if last_pen is not None and str(exc) != "less than one CV window of history":
                        last_pen = replace(last_pen, reused=True)
                        skip(f"cv reused previous penalty: {exc}")
                    else:
                        last_pen = None
                day_pen[d] = last_pen
            choice = day_pen[d]
            if choice is None:
                skip("no cross-validated penalty")
                continue
            pen_diag, lam, cv_seen = choice.diag, choice.lam, choice.last_target_row
        x_ok = valid[t]
        if not x_ok.any():
            skip("no features at forecast time")
            continue
        try:
            rows = sched.window(t)
            key = (rows[0], rows[-1], d if penalty == "cv" else None)
            if key not in cache:
                batch = assemble_batch(features, valid, targets, rows, sched)
                if len(batch) < min_rows:
                    raise SkipPrediction("too few rows for the fit")
                coef = ridge_fit(batch, pen_diag, panel.times[t], cfg.horizon, lam)
                cache[key] = (coef, int(batch.target_rows.max()))
            coef, seen = cache[key]
        except SkipPrediction as exc:
            skip(str(exc))
            continue
        preds[t, x_ok] = coef.mu + features[t, x_ok] @ coef.theta
        lambdas[t] = lam
        trained[t] = max(seen, cv_seen)
    return ForecastSet(model, cfg.horizon, panel.times, panel.tickers, preds, lambdas, trained, skipped)


def _check_aligned(signals: SignalPanel, panel: ReturnPanel):
    if len(signals.times) != len(panel.times) or np.any(signals.times != panel.times) or list(signals.tickers) != list(panel.tickers):
        raise ValueError("signal and return panels are not aligned")


def run_baseline(signals: SignalPanel, panel: ReturnPanel, cfg: HorizonConfig, washout_days: int = 1, **kw) -> ForecastSet:
    """Unregularized OLS on the single slice t - buffer - 1."""
    _check_aligned(signals, panel)
    one = replace(cfg, window=1)
    return run_readout(signals.Z, ~signals.missing_mask, panel, one, model="baseline", penalty="zero",
                       washout_days=washout_days, **kw)


def run_benchmark(signals: SignalPanel, panel: ReturnPanel, cfg: HorizonConfig, washout_days: int = 1,
                  zero_penalty: bool = False, **kw) -> ForecastSet:
    """Windowed ridge on the raw signals with a daily cross-validated penalty."""
    _check_aligned(signals, panel)
    return run_readout(signals.Z, ~signals.missing_mask, panel, cfg, model="benchmark",
                       penalty="zero" if zero_penalty else "cv", washout_days=washout_days, **kw)


def reservoir_features(signals: SignalPanel, spec: ReservoirSpec, weights: ReservoirWeights | None = None):
    """Per-stock state panel (T x N x K) and its training-validity mask."""
    if spec.D != signals.D:
        raise ValueError(f"reservoir input dimension {spec.D} != signal count {signals.D}")
    w = weights if weights is not None else sample_weights(spec)
    return run_state_sequence(w, spec, signals.Z, missing=signals.missing_mask)


def run_esn(signals: SignalPanel, panel: ReturnPanel, cfg: HorizonConfig, spec: ReservoirSpec,
            weights: ReservoirWeights | None = None, washout_days: int = 1, model: str = "esn", **kw) -> ForecastSet:
    """Windowed ridge on reservoir states; decayed states never enter a batch
    and give no prediction."""
    _check_aligned(signals, panel)
    states, valid = reservoir_features(signals, spec, weights)
    return run_readout(states, valid, panel, cfg, model=model, penalty="cv", washout_days=washout_days, **kw)

"""Minute-bar ingestion, 10-minute resampling and return panels.

Prices on the prediction grid are the last trade price of the resampled bar
starting at each grid mark.  A trading day carries 40 marks: the 39 prediction
slots 09:30, 09:40, ..., 15:50 plus the 16:00 close mark, so the return stored
at mark ``k`` is ``P[k] / P[k-1] - 1``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BAR_FIELDS = (
    "Date",
    "Ticker",
    "TimeBarStart",
    "FirstTradePrice",
    "HighTradePrice",
    "LowTradePrice",
    "LastTradePrice",
    "VolumeWeightPrice",
    "Volume",
    "TotalTrades",
)

MS_PER_MINUTE = 60_000
# bars outside [04:00, 20:00) are never valid AlgoSeek bars
EARLIEST_BAR_MS = 4 * 60 * MS_PER_MINUTE
LATEST_BAR_MS = 20 * 60 * MS_PER_MINUTE

# horizon name -> number of 10-minute grid steps (None: to the close)
HORIZONS: dict[str, int | None] = {
    "10min": 1,
    "30min": 3,
    "60min": 6,
    "2hr": 12,
    "EOD": None,
}


class BarDataError(ValueError):
    """Raised for unusable bar input."""


class BarSchemaError(BarDataError):
    pass


@dataclass(frozen=True)
class RowError:
    line: int
    reason: str


def horizon_steps(horizon: str, calendar: "TradingCalendar | None" = None) -> int:
    """Grid steps spanned by ``horizon``; EOD counts as one full session."""
    if horizon not in HORIZONS:
        raise ValueError(f"unknown horizon {horizon!r}; expected one of {list(HORIZONS)}")
    steps = HORIZONS[horizon]
    if steps is None:
        return (calendar or TradingCalendar()).n_slots
    return steps


@dataclass(frozen=True)
class TradingCalendar:
    """Session grid.  Times are minutes after midnight, EST."""

    session_open: int = 9 * 60 + 30
    session_close: int = 16 * 60
    bar_step: int = 10
    trading_days: tuple = ()

    def __post_init__(self):
        span = self.session_close - self.session_open
        if self.bar_step <= 0 or span % self.bar_step:
            raise ValueError("session length must be a positive multiple of bar_step")

    @property
    def n_slots(self) -> int:
        """Prediction slots per day (39 for the default session)."""
        return (self.session_close - self.session_open) // self.bar_step

    @property
    def marks_per_day(self) -> int:
        return self.n_slots + 1

    @property
    def last_prediction_time(self) -> int:
        return self.session_close - self.bar_step

    def mark_minutes(self) -> np.ndarray:
        return self.session_open + self.bar_step * np.arange(self.marks_per_day)

    @classmethod
    def from_business_days(cls, start: str, n_days: int, **kwargs) -> "TradingCalendar":
        first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
        days = np.busday_offset(first, np.arange(n_days), roll="forward")
        return cls(trading_days=tuple(days.astype("datetime64[D]")), **kwargs)

    def with_days(self, days: Iterable) -> "TradingCalendar":
        days = np.unique(np.asarray(list(days), dtype="datetime64[D]"))
        return TradingCalendar(self.session_open, self.session_close, self.bar_step, tuple(days))

    def grid_times(self) -> np.ndarray:
        days = np.asarray(self.trading_days, dtype="datetime64[D]").astype("datetime64[m]")
        offs = self.mark_minutes().astype("timedelta64[m]")
        return (days[:, None] + offs[None, :]).ravel()


@dataclass(frozen=True)
class GridLayout:
    """Row bookkeeping for a panel laid out on a :class:`TradingCalendar`."""

    day: np.ndarray  # day ordinal per row, 0-based and contiguous
    slot: np.ndarray  # mark index within the day; n_slots is the close mark
    n_slots: int

    @classmethod
    def from_times(cls, times: np.ndarray, calendar: TradingCalendar | None = None) -> "GridLayout":
        cal = calendar or TradingCalendar()
        t = np.asarray(times, dtype="datetime64[m]")
        dates = t.astype("datetime64[D]")
        minutes = (t - dates.astype("datetime64[m]")).astype(np.int64)
        off = minutes - cal.session_open
        if np.any(off % cal.bar_step) or np.any(off < 0) or np.any(off > cal.n_slots * cal.bar_step):
            raise ValueError("panel times do not lie on the calendar grid")
        if len(t) > 1 and np.any(np.diff(t) <= np.timedelta64(0, "m")):
            raise ValueError("panel times must be strictly increasing")
        _, day = np.unique(dates, return_inverse=True)
        return cls(day=day.astype(np.int64), slot=(off // cal.bar_step).astype(np.int64), n_slots=cal.n_slots)

    @property
    def n_days(self) -> int:
        return int(self.day.max()) + 1 if len(self.day) else 0

    @property
    def is_prediction(self) -> np.ndarray:
        return self.slot < self.n_slots

    def day_rows(self, d: int) -> np.ndarray:
        return np.flatnonzero(self.day == d)

    def close_row_of(self) -> np.ndarray:
        """Row index of each row's same-day close mark (-1 if the day is truncated)."""
        out = np.full(len(self.day), -1, dtype=np.int64)
        closes = np.flatnonzero(self.slot == self.n_slots)
        out_days = self.day[closes]
        lookup = np.full(self.n_days, -1, dtype=np.int64)
        lookup[out_days] = closes
        out[:] = lookup[self.day]
        return out


@dataclass
class BarSeries:
    """Columnar OHLC bars.  ``bar_start`` is milliseconds after midnight."""

    date: np.ndarray
    ticker: np.ndarray
    bar_start: np.ndarray
    first: np.ndarray
    high: np.ndarray
    low: np.ndarray
    last: np.ndarray
    vwap: np.ndarray
    volume: np.ndarray
    total_trades: np.ndarray
    rejected: list[RowError] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.date)

    @classmethod
    def empty(cls) -> "BarSeries":
        f = np.empty(0)
        return cls(np.empty(0, "datetime64[D]"), np.empty(0, dtype=object), np.empty(0, np.int64),
                   f, f, f, f, f, f, f)

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "BarSeries":
        """Build from dicts keyed like the bar file header (already typed values)."""
        if not records:
            return cls.empty()
        col = lambda k: [r[k] for r in records]  # noqa: E731
        return cls(
            date=np.asarray(col("Date"), dtype="datetime64[D]"),
            ticker=np.asarray(col("Ticker"), dtype=object),
            bar_start=np.asarray(col("TimeBarStart"), dtype=np.int64),
            first=np.asarray(col("FirstTradePrice"), float),
            high=np.asarray(col("HighTradePrice"), float),
            low=np.asarray(col("LowTradePrice"), float),
            last=np.asarray(col("LastTradePrice"), float),
            vwap=np.asarray(col("VolumeWeightPrice"), float),
            volume=np.asarray(col("Volume"), float),
            total_trades=np.asarray(col("TotalTrades"), float),
        )

    def take(self, idx: np.ndarray) -> "BarSeries":
        return BarSeries(
            self.date[idx], self.ticker[idx], self.bar_start[idx], self.first[idx], self.high[idx],
            self.low[idx], self.last[idx], self.vwap[idx], self.volume[idx], self.total_trades[idx],
            list(self.rejected),
        )

    def sorted(self) -> "BarSeries":
        order = np.lexsort((self.bar_start, self.date, self.ticker.astype(str)))
        return self.take(order)


def parse_bar_time(text: str) -> int:
    """HHMM, HHMMSS or HHMMSSMMM -> milliseconds after midnight."""
    s = text.strip()
    if not s.isdigit() or len(s) not in (3, 4, 5, 6, 8, 9):
        raise ValueError(f"bad TimeBarStart {text!r}")
    # leading zeros are commonly dropped (e.g. 930 for 09:30)
    if len(s) in (3, 4):
        s = s.zfill(4) + "00000"
    elif len(s) in (5, 6):
        s = s.zfill(6) + "000"
    else:
        s = s.zfill(9)
    hh, mm, ss, ms = int(s[:2]), int(s[2:4]), int(s[4:6]), int(s[6:])
    if hh > 23 or mm > 59 or ss > 59:
        raise ValueError(f"bad TimeBarStart {text!r}")
    return ((hh * 60 + mm) * 60 + ss) * 1000 + ms


def _check_bar(rec: dict) -> str | None:
    first, high, low, last = (rec[k] for k in ("FirstTradePrice", "HighTradePrice", "LowTradePrice", "LastTradePrice"))
    prices = (first, high, low, last, rec["VolumeWeightPrice"])
    if not all(math.isfinite(p) and p > 0 for p in prices):
        return "non-positive or non-finite price"
    if low > min(first, last) or high < max(first, last) or low > high:
        return "high/low inconsistent with first/last trade"
    if not (rec["Volume"] >= 0 and rec["TotalTrades"] >= 0):
        return "negative volume or trade count"
    if not EARLIEST_BAR_MS <= rec["TimeBarStart"] < LATEST_BAR_MS:
        return "bar start outside 04:00-20:00"
    return None


def _bar_files(path) -> list[Path]:
    if isinstance(path, (list, tuple)):
        return [Path(p) for p in path]
    p = Path(path)
    if p.is_dir():
        return sorted(q for q in p.iterdir() if q.suffix.lower() in (".csv", ".txt"))
    return [p]


def ingest_bars(path, schema: Sequence[str] = BAR_FIELDS, max_errors: int | None = None) -> BarSeries:
    """Parse one bar file, a directory of per-day files, or a list of files.

    Rows violating the bar invariants are skipped and reported in
    ``BarSeries.rejected``; more than ``max_errors`` of them aborts.
    """
    records: list[dict] = []
    errors: list[RowError] = []
    for fp in _bar_files(path):
        with open(fp, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise BarSchemaError(f"{fp}: empty file") from None
            missing = [f for f in schema if f not in header]
            extra = [h for h in header if h not in schema]
            if missing or extra:
                raise BarSchemaError(f"{fp}: header mismatch (missing {missing}, unexpected {extra})")
            pos = {name: header.index(name) for name in schema}
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                try:
                    if len(row) != len(header):
                        raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                    rec = {
                        "Date": np.datetime64(_iso_date(row[pos["Date"]]), "D"),
                        "Ticker": row[pos["Ticker"]].strip(),
                        "TimeBarStart": parse_bar_time(row[pos["TimeBarStart"]]),
                    }
                    for k in schema[3:]:
                        rec[k] = float(row[pos[k]])
                    if not rec["Ticker"]:
                        raise ValueError("empty ticker")
                except ValueError as exc:
                    errors.append(RowError(lineno, f"{fp.name}: unparseable row: {exc}"))
                else:
                    reason = _check_bar(rec)
                    if reason:
                        errors.append(RowError(lineno, f"{fp.name}: {reason}"))
                    else:
                        records.append(rec)
                if max_errors is not None and len(errors) > max_errors:
                    raise BarDataError(f"more than {max_errors} bad rows; first: {errors[0]}")
    bars = BarSeries.from_records(records).sorted()
    bars.rejected = errors
    if errors:
        logger.warning("rejected %d bar rows", len(errors))
    return bars


def _iso_date(text: str) -> str:
    s = text.strip()
    if len(s) != 8 or not s.isdigit():
        raise ValueError(f"bad Date {text!r}")
    return f"{s[:4]}-{s[4:6]}-{s[6:]}"


def resample_bars(
    bars: BarSeries,
    step: int = 10,
    calendar: TradingCalendar | None = None,
    input_resolution: int = 1,
) -> BarSeries:
    """Aggregate bars into ``step``-minute windows aligned to midnight.

    With a calendar, only market-session bars are kept: starts in
    [open, close), plus a bar starting exactly at the close (closing auction),
    which forms the close-mark bar on its own.
    """
    if step <= 0 or step % input_resolution:
        raise ValueError("step must be a positive multiple of the input resolution")
    if len(bars) == 0:
        return BarSeries.empty()
    step_ms = step * MS_PER_MINUTE
    keep = np.ones(len(bars), bool)
    if calendar is not None:
        open_ms = calendar.session_open * MS_PER_MINUTE
        close_ms = calendar.session_close * MS_PER_MINUTE
        keep = ((bars.bar_start >= open_ms) & (bars.bar_start < close_ms)) | (bars.bar_start == close_ms)
    b = bars.take(np.flatnonzero(keep)).sorted()
    if len(b) == 0:
        return BarSeries.empty()
    window = b.bar_start // step_ms
    tick = b.ticker.astype(str)
    new_group = np.ones(len(b), bool)
    new_group[1:] = (tick[1:] != tick[:-1]) | (b.date[1:] != b.date[:-1]) | (window[1:] != window[:-1])
    starts = np.flatnonzero(new_group)
    ends = np.r_[starts[1:], len(b)] - 1
    vol = np.add.reduceat(b.volume, starts)
    pv = np.add.reduceat(b.vwap * b.volume, starts)
    counts = np.diff(np.r_[starts, len(b)])
    mean_vwap = np.add.reduceat(b.vwap, starts) / counts
    with np.errstate(invalid="ignore", divide="ignore"):
        vwap = np.where(vol > 0, pv / np.where(vol > 0, vol, 1.0), mean_vwap)
    out = BarSeries(
        date=b.date[starts],
        ticker=b.ticker[starts],
        bar_start=window[starts] * step_ms,
        first=b.first[starts],
        high=np.maximum.reduceat(b.high, starts),
        low=np.minimum.reduceat(b.low, starts),
        last=b.last[ends],
        vwap=vwap,
        volume=vol,
        total_trades=np.add.reduceat(b.total_trades, starts),
    )
    out.rejected = list(bars.rejected)
    return out


@dataclass
class ReturnPanel:
    """T x N simple returns on the trading grid.  Missing entries hold NaN."""

    times: np.ndarray
    tickers: list[str]
    values: np.ndarray
    missing_mask: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype="datetime64[m]")
        self.values = np.asarray(self.values, dtype=float)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        self.tickers = [str(t) for t in self.tickers]
        T, N = len(self.times), len(self.tickers)
        if self.values.shape != (T, N) or self.missing_mask.shape != (T, N):
            raise ValueError(f"panel arrays must be {(T, N)}, got {self.values.shape} / {self.missing_mask.shape}")
        if not np.all(np.isfinite(self.values[~self.missing_mask])):
            raise ValueError("non-finite return outside the missing mask")
        self.values = np.where(self.missing_mask, np.nan, self.values)

    @classmethod
    def from_values(cls, times, tickers, values) -> "ReturnPanel":
        v = np.asarray(values, float)
        return cls(times, tickers, v, ~np.isfinite(v))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_observed(self) -> np.ndarray:
        """N_t: non-missing entries per row."""
        return (~self.missing_mask).sum(axis=1)

    def slice_rows(self, rows) -> "ReturnPanel":
        return ReturnPanel(self.times[rows], self.tickers, self.values[rows], self.missing_mask[rows])

    def layout(self, calendar: TradingCalendar | None = None) -> GridLayout:
        return GridLayout.from_times(self.times, calendar)


def price_grid(bars: BarSeries, calendar: TradingCalendar) -> tuple[np.ndarray, list[str], np.ndarray]:
    """Last-trade prices on the calendar grid: (times, tickers, T x N prices)."""
    if not calendar.trading_days:
        calendar = calendar.with_days(np.unique(bars.date))
    times = calendar.grid_times()
    tickers = sorted(set(bars.ticker.astype(str)))
    prices = np.full((len(times), len(tickers)), np.nan)
    if len(bars) == 0:
        return times, tickers, prices
    col = {t: j for j, t in enumerate(tickers)}
    stamp = bars.date.astype("datetime64[m]") + (bars.bar_start // MS_PER_MINUTE).astype("timedelta64[m]")
    row = np.searchsorted(times, stamp)
    ok = (row < len(times)) & (times[np.minimum(row, len(times) - 1)] == stamp)
    ok &= (bars.bar_start % (calendar.bar_step * MS_PER_MINUTE)) == 0
    cols = np.array([col[t] for t in bars.ticker.astype(str)], dtype=np.int64)
    prices[row[ok], cols[ok]] = bars.last[ok]
    return times, tickers, prices


def compute_returns(bars: BarSeries, calendar: TradingCalendar | None = None, overnight: bool = False) -> ReturnPanel:
    """Simple returns between consecutive grid marks from resampled bars.

    The 09:30 mark has no return unless ``overnight`` links it to the prior
    day's close mark.
    """
    cal = calendar or TradingCalendar()
    if not cal.trading_days:
        cal = cal.with_days(np.unique(bars.date))
    times, tickers, P = price_grid(bars, cal)
    m = cal.marks_per_day
    P3 = P.reshape(-1, m, P.shape[1])
    R = np.full_like(P3, np.nan)
    R[:, 1:] = P3[:, 1:] / P3[:, :-1] - 1.0
    if overnight and len(P3) > 1:
        R[1:, 0] = P3[1:, 0] / P3[:-1, -1] - 1.0
    return ReturnPanel.from_values(times, tickers, R.reshape(P.shape))


def forward_fill_returns(panel: ReturnPanel) -> ReturnPanel:
    """Hold prices at the last observation: missing returns after a ticker's
    first observation become 0; earlier entries stay missing."""
    seen = np.maximum.accumulate(~panel.missing_mask, axis=0)
    fill = panel.missing_mask & seen
    vals = np.where(fill, 0.0, panel.values)
    return ReturnPanel(panel.times, panel.tickers, vals, panel.missing_mask & ~fill)


def horizon_targets(panel: ReturnPanel, horizon: str, calendar: TradingCalendar | None = None) -> np.ndarray:
    """Realized h-ahead compounded returns for every row (NaN where undefined).

    Row t holds prod(1 + r[t+1..t+h]) - 1; EOD compounds through the close
    mark.  Undefined past the session end, at the close mark itself, and
    whenever any constituent return is missing.
    """
    lay = panel.layout(calendar)
    r = panel.values
    T, N = r.shape
    out = np.full((T, N), np.nan)
    horizon_steps(horizon)  # validates the name
    steps = HORIZONS[horizon]
    if steps is None:
        close = lay.close_row_of()
        growth = np.full((T, N), np.nan)
        for t in range(T - 1, -1, -1):
            if lay.slot[t] == lay.n_slots:
                growth[t] = 1.0
            elif t + 1 < T and lay.day[t + 1] == lay.day[t]:
                growth[t] = growth[t + 1] * (1.0 + r[t + 1])
        ok = lay.is_prediction & (close >= 0)
        out[ok] = growth[ok] - 1.0
        return out
    for t in range(T):
        if lay.slot[t] + steps > lay.n_slots or t + steps >= T or lay.day[t + steps] != lay.day[t]:
            continue
        out[t] = np.prod(1.0 + r[t + 1 : t + steps + 1], axis=0) - 1.0
    return out


def realized_horizon_return(panel: ReturnPanel, t, i, horizon: str, calendar: TradingCalendar | None = None) -> float:
    """Single-entry compounded return over (t, t+h]; NaN if undefined.

    ``t`` may be a row index or a timestamp, ``i`` a column index or ticker.
    """
    lay = panel.layout(calendar)
    row = int(t) if isinstance(t, (int, np.integer)) else int(np.flatnonzero(panel.times == np.datetime64(t, "m"))[0])
    col = panel.tickers.index(i) if isinstance(i, str) else int(i)
    if not lay.is_prediction[row]:
        return float("nan")
    steps = HORIZONS[horizon]
    if steps is None:
        steps = lay.n_slots - lay.slot[row]
    if lay.slot[row] + steps > lay.n_slots or row + steps >= len(panel.times):
        return float("nan")
    chunk = panel.values[row + 1 : row + steps + 1, col]
    if np.any(np.isnan(chunk)):
        return float("nan")
    return float(np.prod(1.0 + chunk) - 1.0)

"""On-disk formats for panels, signals and reservoir weights.

Text files are long-format CSV.  The binary cache is a small self-describing
container::

    b"ESNCACHE" | uint32 version | uint64 header length | JSON header | raw arrays

The header lists each array's name, dtype and shape; arrays follow in that
order as little-endian C-contiguous bytes.  No timestamps are stored, so
identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .market_data import ReturnPanel
from .reservoir import ReservoirWeights
from .signals import SignalPanel

MAGIC = b"ESNCACHE"
CACHE_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CacheError(ValueError):
    pass


def write_cache(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs = [], []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"kind": kind, "meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, CACHE_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_cache(path, kind: str) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CacheError(f"{path}: truncated cache file")
    magic, version, n = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CacheError(f"{path}: not a cache file")
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
    try:
        header = json.loads(data[_PREFIX.size : _PREFIX.size + n])
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CacheError(f"{path}: damaged cache header") from None
    if header["kind"] != kind:
        raise CacheError(f"{path}: holds {header['kind']!r}, expected {kind!r}")
    pos = _PREFIX.size + n
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        if pos + count * dt.itemsize > len(data):
            raise CacheError(f"{path}: trailing or missing bytes")
        arrays[e["name"]] = np.frombuffer(data, dt, count, pos).reshape(e["shape"]).copy()
        pos += count * dt.itemsize
    if pos != len(data):
        raise CacheError(f"{path}: trailing or missing bytes")
    return arrays, header["meta"]


def _minutes(times) -> np.ndarray:
    return np.asarray(times, dtype="datetime64[m]").astype(np.int64)


def save_panel_cache(panel: ReturnPanel, path) -> None:
    write_cache(path, "return_panel", {"times": _minutes(panel.times), "values": panel.values,
                                       "missing": panel.missing_mask}, {"tickers": panel.tickers})


def load_panel_cache(path) -> ReturnPanel:
    a, meta = read_cache(path, "return_panel")
    return ReturnPanel(a["times"].astype("datetime64[m]"), meta["tickers"], a["values"], a["missing"])


def write_panel_csv(panel: ReturnPanel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "ticker", "return", "missing"])
        for t, ts in enumerate(panel.times):
            for i, tic in enumerate(panel.tickers):
                miss = bool(panel.missing_mask[t, i])
                w.writerow([str(ts), tic, "" if miss else repr(float(panel.values[t, i])), int(miss)])


def _read_long_csv(path, value_cols: int):
    times, tickers, rows = {}, {}, []
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        for line, rec in enumerate(r, start=2):
            if len(rec) != len(header):
                raise ValueError(f"{path}:{line}: expected {len(header)} fields")
            times.setdefault(rec[0], len(times))
            tickers.setdefault(rec[1], len(tickers))
            rows.append(rec)
    tl = np.array(sorted(times), dtype="datetime64[m]")
    tk = list(tickers)
    ti = {str(t): k for k, t in enumerate(tl)}
    vals = np.full((len(tl), len(tk), value_cols), np.nan)
    miss = np.ones((len(tl), len(tk)), bool)
    for rec in rows:
        t, i = ti[str(np.datetime64(rec[0], "m"))], tickers[rec[1]]
        miss[t, i] = rec[-1] == "1"
        if not miss[t, i]:
            vals[t, i] = [float(x) for x in rec[2:-1]]
    return header, tl, tk, vals, miss


def read_panel_csv(path) -> ReturnPanel:
    header, times, tickers, vals, miss = _read_long_csv(path, 1)
    if header != ["time", "ticker", "return", "missing"]:
        raise ValueError(f"{path}: unexpected panel header {header}")
    return ReturnPanel(times, tickers, vals[..., 0], miss)


def save_signal_cache(sig: SignalPanel, path) -> None:
    write_cache(path, "signal_panel", {"times": _minutes(sig.times), "Z": sig.Z, "missing": sig.missing_mask},
                {"tickers": sig.tickers, "windows": list(sig.windows)})


def load_signal_cache(path) -> SignalPanel:
    a, meta = read_cache(path, "signal_panel")
    return SignalPanel(a["times"].astype("datetime64[m]"), meta["tickers"], a["Z"], a["missing"], meta["windows"])


def write_signal_csv(sig: SignalPanel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "ticker", *(f"z_{P}" for P in sig.windows), "missing"])
        for t, ts in enumerate(sig.times):
            for i, tic in enumerate(sig.tickers):
                miss = bool(sig.missing_mask[t, i])
                vals = [""] * sig.D if miss else [repr(float(x)) for x in sig.Z[t, i]]
                w.writerow([str(ts), tic, *vals, int(miss)])


def read_signal_csv(path) -> SignalPanel:
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh))
    windows = [int(h[2:]) for h in header[2:-1]]
    _, times, tickers, vals, miss = _read_long_csv(path, len(windows))
    return SignalPanel(times, tickers, vals, miss, windows)


def save_weights_cache(weights: ReservoirWeights, path, spec: dict | None = None) -> None:
    write_cache(path, "reservoir_weights", {"A_bar": weights.A_bar, "C_bar": weights.C_bar, "b_bar": weights.b_bar},
                {"spec": spec or {}})


def load_weights_cache(path) -> ReservoirWeights:
    a, _ = read_cache(path, "reservoir_weights")
    return ReservoirWeights(a["A_bar"], a["C_bar"], a["b_bar"])

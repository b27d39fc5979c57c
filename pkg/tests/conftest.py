import sys

import numpy as np
import pytest

from esn_intraday.signals import build_signal_panel
from esn_intraday.synthetic import SyntheticMarketSpec, simulate_panel

BAR_HEADER = ("Date,Ticker,TimeBarStart,FirstTradePrice,HighTradePrice,LowTradePrice,LastTradePrice,"
              "VolumeWeightPrice,Volume,TotalTrades")


def minute_bar_rows(ticker, date, prices, start_minute=570):
    """One CSV row per minute; ``prices`` are the last-trade prices."""
    rows = []
    prev = prices[0]
    for k, p in enumerate(prices):
        minute = start_minute + k
        hhmm = f"{minute // 60:02d}{minute % 60:02d}"
        lo, hi = min(prev, p), max(prev, p)
        rows.append(f"{date},{ticker},{hhmm},{prev},{hi},{lo},{p},{(prev + p) / 2},{100 + k},{1 + k % 3}")
        prev = p
    return rows


@pytest.fixture(scope="session")
def small_market():
    """20 stocks, 20 days: panel and signals shared by the training tests."""
    spec = SyntheticMarketSpec.random(20, 2, n_days=20, kappa=0.5, sigma=1e-3, factor_vol=2e-4, seed=3)
    panel = simulate_panel(spec)
    sig = build_signal_panel(panel)
    return panel, sig


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])

"""Random-search tuning on a pre-sample, then a seed-robustness study.

The first 15 days of a simulated market serve as the tuning pre-sample; the
winning reservoir is then redrawn with ten different seeds and its relative
cumulated MSFE against the benchmark is summarized in quantile bands.

    python demos/03_tuning_and_robustness.py
"""

import numpy as np

from esn_intraday.evaluation import robustness_study
from esn_intraday.signals import SignalPanel, build_signal_panel
from esn_intraday.synthetic import SyntheticMarketSpec, simulate_panel
from esn_intraday.training import HorizonConfig
from esn_intraday.tuning import SearchSpace, tune

spec = SyntheticMarketSpec.random(30, 2, n_days=30, kappa=0.5, sigma=1e-3, factor_vol=2e-4, seed=2)
panel = simulate_panel(spec)
signals = build_signal_panel(panel)
cfg = HorizonConfig.default("10min")

pre = np.flatnonzero(panel.layout().day < 15)
pre_signals = SignalPanel(signals.times[pre], signals.tickers, signals.Z[pre], signals.missing_mask[pre],
                          signals.windows)
result = tune(SearchSpace(budget=8, seed=2), pre_signals, panel.slice_rows(pre), cfg,
              evaluation_start=panel.times[pre[-1] + 1])
print(f"pre-sample {result.sample_start} .. {result.sample_end}")
for t in result.trials:
    s = t.spec
    print(f"  trial {t.index}: alpha={s.alpha:.1f} rho={s.rho:.1f} gamma={s.gamma:.3f} "
          f"cuMSFE={t.objective:.4e} ({t.seconds:.1f}s)")
print(f"winner: trial {[t.spec for t in result.trials].index(result.best)}")

study = robustness_study(result.best, 10, signals, panel, cfg)
last = {p: b[-1] for p, b in study.bands.items()}
print(f"\nrelative cuMSFE vs benchmark at the last event over seeds {study.seeds[0]}..{study.seeds[-1]}:")
print(f"  median {last[50]:+.2f}%, 50% band [{last[25]:+.2f}%, {last[75]:+.2f}%], "
      f"90% band [{last[5]:+.2f}%, {last[95]:+.2f}%]")

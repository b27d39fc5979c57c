"""Seeded random search over reservoir hyperparameters.

Each trial runs the full ESN walk-forward on a pre-sample and scores it by
its terminal cumulated MSFE.  Trial specifications are drawn up front, so
the trial sequence and the winner do not depend on how trials are mapped.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .evaluation import EvaluationError, msfe_series
from .market_data import ReturnPanel, horizon_targets
from .reservoir import ReservoirSpec
from .signals import SignalPanel
from .training import HorizonConfig, run_esn


class TuningError(RuntimeError):
    pass


def _grid(start, stop, step):
    n = int(round((stop - start) / step))
    return tuple(round(start + k * step, 10) for k in range(n + 1))


@dataclass(frozen=True)
class SearchSpace:
    alpha: tuple = _grid(0.0, 1.0, 0.1)
    rho: tuple = _grid(0.0, 1.0, 0.1)
    gamma: tuple = tuple(round(0.005 * k, 10) for k in range(1, 11))
    a_sparsity: tuple = tuple(round(0.05 * k, 10) for k in range(1, 20))
    c_sparsity: tuple = tuple(round(0.05 * k, 10) for k in range(1, 20))
    K: int = 100
    budget: int = 50
    seed: int = 0
    reservoir_seed: int = 0

    PARAMS = ("alpha", "rho", "gamma", "a_sparsity", "c_sparsity")

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        for p in self.PARAMS:
            if len(getattr(self, p)) == 0:
                raise ValueError(f"empty range for {p}")

    def sample(self, D: int = 6) -> list[ReservoirSpec]:
        """The ``budget`` trial specifications, in trial order."""
        rng = np.random.default_rng(self.seed)
        out = []
        for _ in range(self.budget):
            vals = {p: float(getattr(self, p)[rng.integers(len(getattr(self, p)))]) for p in self.PARAMS}
            out.append(ReservoirSpec(K=self.K, D=D, seed=self.reservoir_seed, **vals))
        return out


@dataclass
class Trial:
    index: int
    spec: ReservoirSpec
    objective: float
    seconds: float
    error: str = ""


@dataclass
class TuningResult:
    horizon: str
    best: ReservoirSpec
    best_objective: float
    trials: list[Trial]
    sample_start: str
    sample_end: str

    def fragment(self) -> dict:
        """Config fragment: ``{"reservoir": {horizon: spec}, "tuning": {...}}``."""
        return {
            "reservoir": {self.horizon: self.best.to_dict()},
            "tuning": {self.horizon: {"objective": self.best_objective, "trials": len(self.trials),
                                      "sample_start": self.sample_start, "sample_end": self.sample_end}},
        }

    def write_log(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", *SearchSpace.PARAMS, "K", "seed", "cumsfe", "seconds", "sample_start", "sample_end",
                        "error"])
            for t in self.trials:
                w.writerow([t.index, *(getattr(t.spec, p) for p in SearchSpace.PARAMS), t.spec.K, t.spec.seed,
                            repr(t.objective), f"{t.seconds:.3f}", self.sample_start, self.sample_end, t.error])


def esn_objective(spec: ReservoirSpec, signals: SignalPanel, panel: ReturnPanel, cfg: HorizonConfig, **kw) -> float:
    """Terminal cuMSFE of the ESN on the cells it forecasts."""
    f = run_esn(signals, panel, cfg, spec, **kw)
    return msfe_series(f, horizon_targets(panel, cfg.horizon)).total


@dataclass
class _TrialRun:
    signals: SignalPanel
    panel: ReturnPanel
    cfg: HorizonConfig
    kw: dict = field(default_factory=dict)

    def __call__(self, item) -> Trial:
        k, spec = item
        t0 = time.perf_counter()
        try:
            obj = esn_objective(spec, self.signals, self.panel, self.cfg, **self.kw)
            err = ""
        except (EvaluationError, ValueError, np.linalg.LinAlgError) as exc:
            obj, err = float("nan"), f"{type(exc).__name__}: {exc}"
        return Trial(k, spec, obj, time.perf_counter() - t0, err)


def tune(space: SearchSpace, signals: SignalPanel, panel: ReturnPanel, cfg: HorizonConfig,
         evaluation_start=None, mapper=map, **kw) -> TuningResult:
    """Random search for ``cfg.horizon`` on a pre-sample panel.

    ``evaluation_start`` (timestamp) is the first evaluation-period time; the
    pre-sample must end strictly before it.
    """
    if len(panel.times) == 0:
        raise TuningError("empty pre-sample")
    start, end = panel.times[0], panel.times[-1]
    if evaluation_start is not None and end >= np.datetime64(evaluation_start, "m"):
        raise TuningError(f"pre-sample ends at {end}, not before the evaluation start {evaluation_start}")
    specs = space.sample(signals.D)
    trials = sorted(mapper(_TrialRun(signals, panel, cfg, kw), enumerate(specs)), key=lambda t: t.index)
    ok = [t for t in trials if np.isfinite(t.objective)]
    if not ok:
        detail = "; ".join(f"trial {t.index}: {t.error}" for t in trials)
        raise TuningError(f"all {len(trials)} trials failed ({detail})")
    best = min(ok, key=lambda t: (t.objective, t.index))
    return TuningResult(cfg.horizon, best.spec, best.objective, trials, str(start), str(end))


def apply_fragment(reservoir: dict[str, ReservoirSpec], fragment: dict) -> dict[str, ReservoirSpec]:
    """Merge a tuning fragment's specs into a per-horizon spec map."""
    out = dict(reservoir)
    for h, d in fragment.get("reservoir", {}).items():
        out[h] = replace(out.get(h, ReservoirSpec()), **d)
    return out

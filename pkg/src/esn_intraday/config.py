"""Run configuration: one JSON file, flag and environment overrides.

Key schema (all keys optional except where noted)::

    {
      "seed": 0,
      "output": "runs/demo",
      "jobs": 1,
      "horizons": ["10min", "30min", "60min", "2hr", "EOD"],
      "models": ["baseline", "benchmark", "esn"],
      "data": {
        "source": "synthetic" | "bars",
        "path": "bars/",                 # bars only: file or directory
        "overnight": false,
        "max_errors": null,
        "synthetic": {"N": 50, "J": 3, "n_days": 60, "T": null, "kappa": 0.5, "m": 0.0, "sigma": 0.001,
                      "factor_vol": 0.0002, "loading_scale": 1.0, "drift_scale": 0.0,
                      "missing_rate": 0.0, "start": "2013-01-02"}
      },
      "signals": {"windows": [10, 20, 30, 60, 100, 150], "n_factors": 15,
                  "factor_window_days": 5, "ou_window": 200},
      "training": {"washout_days": 1, "cv_scheme": "rolling",
                   "<horizon>": {"window": "30min", "buffer": "10min", "cv_window": "1week", "cv_split": 0.7}},
      "reservoir": {"<horizon>": {"alpha": 0.9, "rho": 0.4, "gamma": 0.005, "a_sparsity": 0.15,
                                  "c_sparsity": 0.95, "K": 100, "seed": 0}},
      "evaluation": {"baseline": "baseline", "start_day": 0, "mcs_alpha": 0.05, "mcs_draws": 10000},
      "tuning": {"budget": 50, "seed": 0},
      "fragments": ["tuned.json"]        # deep-merged on top, paths relative to this file
    }

Reservoir entries override the per-horizon defaults field by field; an
unset reservoir seed takes the global seed.  Top-level keys can be
overridden by environment variables ``ESN_INTRADAY_<KEY>`` (JSON values, or
plain strings).
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

from . import __version__
from .market_data import HORIZONS
from .reservoir import DEFAULT_SPECS, ReservoirError, ReservoirSpec
from .signals import SignalConfig
from .synthetic import SyntheticMarketSpec
from .training import HorizonConfig

ENV_PREFIX = "ESN_INTRADAY_"
MODELS = ("baseline", "benchmark", "esn")
TOP_LEVEL = ("seed", "output", "jobs", "horizons", "models", "data", "signals", "training", "reservoir",
             "evaluation", "tuning", "fragments")

DEFAULTS = {
    "seed": 0,
    "output": "esn_intraday_run",
    "jobs": 1,
    "horizons": list(HORIZONS),
    "models": list(MODELS),
    "data": {"source": "synthetic", "overnight": False, "max_errors": None, "synthetic": {}},
    "signals": {},
    "training": {"washout_days": 1, "cv_scheme": "rolling"},
    "reservoir": {},
    "evaluation": {"baseline": "baseline", "start_day": 0, "mcs_alpha": 0.05, "mcs_draws": 10_000},
    "tuning": {"budget": 50, "seed": 0},
}

SYNTHETIC_DEFAULTS = {"N": 50, "J": 3, "n_days": 60, "T": None, "kappa": 0.5, "m": 0.0, "sigma": 1e-3, "factor_vol": 2e-4,
                      "loading_scale": 1.0, "drift_scale": 0.0, "missing_rate": 0.0, "start": "2013-01-02"}


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _env_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass
class RunConfig:
    raw: dict
    source_path: Path | None = None

    # -- construction

    @classmethod
    def from_dict(cls, d: dict, source_path=None, env: dict | None = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(d) - set(TOP_LEVEL)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        merged = deep_merge(DEFAULTS, d)
        base = Path(source_path).parent if source_path else Path(".")
        for frag in merged.pop("fragments", None) or []:
            p = base / frag
            try:
                merged = deep_merge(merged, json.loads(p.read_text(encoding="utf-8")))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read fragment {p}: {exc}") from None
            merged.pop("fragments", None)
        env = os.environ if env is None else env
        for key in TOP_LEVEL:
            name = ENV_PREFIX + key.upper()
            if name in env:
                merged[key] = _env_value(env[name])
        merged.pop("fragments", None)
        cfg = cls(merged, Path(source_path) if source_path else None)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, env: dict | None = None) -> "RunConfig":
        p = Path(path)
        try:
            d = json.loads(p.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from None
        return cls.from_dict(d, p, env)

    def override(self, **kw) -> "RunConfig":
        """Flag overrides (``None`` values are ignored)."""
        d = copy.deepcopy(self.raw)
        d.update({k: v for k, v in kw.items() if v is not None})
        cfg = RunConfig(d, self.source_path)
        cfg.validate()
        return cfg

    def merge(self, fragment: dict) -> "RunConfig":
        cfg = RunConfig(deep_merge(self.raw, fragment), self.source_path)
        cfg.validate()
        return cfg

    # -- typed views

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output(self) -> Path:
        return Path(self.raw["output"])

    @property
    def jobs(self) -> int:
        return int(self.raw["jobs"])

    @property
    def horizons(self) -> list[str]:
        return list(self.raw["horizons"])

    @property
    def models(self) -> list[str]:
        return list(self.raw["models"])

    def synthetic_spec(self) -> SyntheticMarketSpec:
        d = {**SYNTHETIC_DEFAULTS, **self.raw["data"].get("synthetic", {})}
        n_days, T = int(d.pop("n_days")), d.pop("T")
        N, J = int(d.pop("N")), int(d.pop("J"))
        if T is not None:
            return SyntheticMarketSpec.random(N, J, T=int(T), seed=self.seed, **d)
        return SyntheticMarketSpec.random(N, J, n_days=n_days, seed=self.seed, **d)

    def signal_config(self) -> SignalConfig:
        d = dict(self.raw["signals"])
        if "windows" in d:
            d["windows"] = tuple(int(w) for w in d["windows"])
        return SignalConfig(**d)

    def horizon_config(self, h: str) -> HorizonConfig:
        return HorizonConfig.from_dict(h, self.raw["training"].get(h))

    def reservoir_spec(self, h: str) -> ReservoirSpec:
        d = dict(self.raw["reservoir"].get(h, {}))
        d.setdefault("seed", self.seed)
        d.setdefault("D", len(self.signal_config().windows))
        return replace(DEFAULT_SPECS[h], **d)

    @property
    def washout_days(self) -> int:
        return int(self.raw["training"]["washout_days"])

    @property
    def cv_scheme(self) -> str:
        return str(self.raw["training"]["cv_scheme"])

    # -- checks and identity

    def validate(self) -> None:
        r = self.raw
        try:
            if not isinstance(r["seed"], int) or r["seed"] < 0:
                raise ConfigError("seed must be a non-negative integer")
            if int(r["jobs"]) < 1:
                raise ConfigError("jobs must be at least 1")
            bad = [h for h in r["horizons"] if h not in HORIZONS]
            if bad or not r["horizons"]:
                raise ConfigError(f"unknown or empty horizons: {bad}")
            bad = [m for m in r["models"] if m not in MODELS]
            if bad or not r["models"]:
                raise ConfigError(f"unknown or empty models: {bad}")
            src = r["data"].get("source")
            if src not in ("synthetic", "bars"):
                raise ConfigError(f"data.source must be 'synthetic' or 'bars', got {src!r}")
            if src == "bars" and not r["data"].get("path"):
                raise ConfigError("data.path is required for bar data")
            if src == "synthetic":
                unknown = set(r["data"].get("synthetic", {})) - set(SYNTHETIC_DEFAULTS)
                if unknown:
                    raise ConfigError(f"unknown synthetic keys: {sorted(unknown)}")
                self.synthetic_spec()
            self.signal_config()
            if self.cv_scheme not in ("rolling", "pooled"):
                raise ConfigError("training.cv_scheme must be 'rolling' or 'pooled'")
            for h in r["horizons"]:
                self.horizon_config(h)
                if "esn" in r["models"]:
                    self.reservoir_spec(h)
            ev = r["evaluation"]
            if int(ev.get("start_day", 0)) < 0 or not 0 < float(ev.get("mcs_alpha", 0.05)) < 1:
                raise ConfigError("evaluation.start_day must be >= 0 and mcs_alpha in (0, 1)")
            if int(r["tuning"].get("budget", 1)) < 1:
                raise ConfigError("tuning.budget must be at least 1")
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError, ReservoirError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None

    def resolved(self) -> dict:
        """The configuration with every default materialized."""
        d = copy.deepcopy(self.raw)
        if d["data"]["source"] == "synthetic":
            d["data"]["synthetic"] = {**SYNTHETIC_DEFAULTS, **d["data"].get("synthetic", {})}
        d["signals"] = {"windows": list(self.signal_config().windows), "n_factors": self.signal_config().n_factors,
                        "factor_window_days": self.signal_config().factor_window_days,
                        "ou_window": self.signal_config().ou_window}
        tr = {"washout_days": self.washout_days, "cv_scheme": self.cv_scheme}
        for h in self.horizons:
            c = self.horizon_config(h)
            tr[h] = {"window": c.window, "buffer": c.buffer, "cv_window": c.cv_window, "cv_split": c.cv_split}
        d["training"] = tr
        d["reservoir"] = {h: self.reservoir_spec(h).to_dict() for h in self.horizons}
        return d

    def digest(self) -> str:
        canon = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canon.encode()).hexdigest()

    def manifest(self, command: str, outputs: dict[str, str] | None = None, **extra) -> dict:
        return {"command": command, "version": __version__, "seed": self.seed, "config_hash": self.digest(),
                "config": self.resolved(), "outputs": outputs or {}, **extra}

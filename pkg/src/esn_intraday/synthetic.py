"""Factor-plus-OU return panels for testing without proprietary bars.

Returns follow ``r = a + B F + dU`` with i.i.d. Gaussian factor returns and
an Ornstein-Uhlenbeck residual level ``U`` simulated by its exact AR(1)
discretization on a unit grid step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .market_data import ReturnPanel, TradingCalendar


@dataclass
class SyntheticMarketSpec:
    N: int
    J: int
    T: int
    a: np.ndarray
    B: np.ndarray
    factor_vol: np.ndarray
    kappa: np.ndarray
    m: np.ndarray
    sigma: np.ndarray
    missing_rate: float = 0.0
    seed: int = 0
    dt: float = 1.0
    start: str = "2013-01-02"
    burn_in: int | None = None

    def __post_init__(self):
        self.a = np.broadcast_to(np.asarray(self.a, float), (self.N,)).copy()
        self.B = np.asarray(self.B, float).reshape(self.N, self.J)
        self.factor_vol = np.broadcast_to(np.asarray(self.factor_vol, float), (self.J,)).copy()
        self.kappa = np.broadcast_to(np.asarray(self.kappa, float), (self.N,)).copy()
        self.m = np.broadcast_to(np.asarray(self.m, float), (self.N,)).copy()
        self.sigma = np.broadcast_to(np.asarray(self.sigma, float), (self.N,)).copy()
        if self.dt != 1.0:
            raise ValueError("only unit grid steps are supported (dt = 1)")
        if np.any(self.kappa <= 0) or np.any(self.sigma <= 0) or np.any(self.factor_vol <= 0):
            raise ValueError("kappa, sigma and factor_vol must be positive")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.N < 1 or self.T < 1 or self.J < 0:
            raise ValueError("N, T must be positive and J non-negative")

    @classmethod
    def random(
        cls,
        N: int,
        J: int,
        n_days: int | None = None,
        T: int | None = None,
        *,
        kappa=0.5,
        m=0.0,
        sigma=1e-3,
        factor_vol=1e-3,
        loading_scale=1.0,
        drift_scale=0.0,
        missing_rate=0.0,
        seed: int = 0,
        calendar: TradingCalendar | None = None,
        start: str = "2013-01-02",
    ) -> "SyntheticMarketSpec":
        """Draw loadings and drifts from a seed-derived stream; scalars broadcast."""
        if T is None:
            if n_days is None:
                raise ValueError("give either T or n_days")
            T = n_days * (calendar or TradingCalendar()).marks_per_day
        rng = np.random.default_rng([seed, 1])
        B = loading_scale * rng.standard_normal((N, J))
        a = drift_scale * rng.standard_normal(N)
        return cls(N=N, J=J, T=T, a=a, B=B, factor_vol=factor_vol, kappa=kappa, m=m, sigma=sigma,
                   missing_rate=missing_rate, seed=seed, start=start)

    def burn_in_steps(self) -> int:
        if self.burn_in is not None:
            return int(self.burn_in)
        return int(np.ceil(10.0 * np.max(1.0 / self.kappa)))


def ou_step_params(kappa, sigma):
    """Exact one-step AR coefficient and innovation std of an OU process."""
    kappa = np.asarray(kappa, float)
    phi = np.exp(-kappa)
    innov = np.asarray(sigma, float) * np.sqrt(-np.expm1(-2.0 * kappa) / (2.0 * kappa))
    return phi, innov


def simulate_ou(kappa, m, sigma, T: int, rng: np.random.Generator | int = 0, u0=None) -> np.ndarray:
    """OU levels ``U[0..T-1]`` (vectorized over the trailing axis of the params).

    ``U[t] = m + e^{-kappa} (U[t-1] - m) + innov * xi``; ``u0`` defaults to ``m``
    and is the value preceding ``U[0]``.
    """
    rng = np.random.default_rng(rng)
    kappa, m, sigma = np.broadcast_arrays(np.asarray(kappa, float), np.asarray(m, float), np.asarray(sigma, float))
    phi, innov = ou_step_params(kappa, sigma)
    xi = rng.standard_normal((T,) + kappa.shape)
    out = np.empty((T,) + kappa.shape)
    u = m.copy() if u0 is None else np.broadcast_to(np.asarray(u0, float), kappa.shape).copy()
    for t in range(T):
        u = m + phi * (u - m) + innov * xi[t]
        out[t] = u
    return out


def simulate_panel(spec: SyntheticMarketSpec, calendar: TradingCalendar | None = None, return_components: bool = False):
    """Simulate a return panel; optionally also return ``(F, U)``.

    Times run over consecutive business days from ``spec.start``; a T that is
    not a multiple of the marks per day leaves the last day truncated.
    """
    cal = calendar or TradingCalendar()
    rng = np.random.default_rng(spec.seed)
    burn = spec.burn_in_steps()
    F = rng.standard_normal((spec.T, spec.J)) * spec.factor_vol
    U_all = simulate_ou(spec.kappa, spec.m, spec.sigma, burn + spec.T + 1, rng)
    U = U_all[burn:]
    dU = np.diff(U, axis=0)
    r = spec.a + F @ spec.B.T + dU
    missing = rng.random((spec.T, spec.N)) < spec.missing_rate if spec.missing_rate > 0 else np.zeros((spec.T, spec.N), bool)
    n_days = -(-spec.T // cal.marks_per_day)
    grid = TradingCalendar.from_business_days(spec.start, n_days, session_open=cal.session_open,
                                              session_close=cal.session_close, bar_step=cal.bar_step)
    times = grid.grid_times()[: spec.T]
    tickers = [f"S{i:04d}" for i in range(spec.N)]
    panel = ReturnPanel(times, tickers, np.where(missing, np.nan, r), missing)
    if return_components:
        return panel, F, U[1:]
    return panel

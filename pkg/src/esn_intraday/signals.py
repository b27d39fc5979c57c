"""Modified z-score signals from PCA factor residuals and windowed OU fits.

Two steps per trading day:

1. On the trailing ``factor_window_days`` of forward-filled returns, extract
   ``n_factors`` eigenportfolios from the return correlation matrix and
   regress each stock on them (intercept = drift).  The frozen loadings turn
   the current day's returns into out-of-sample residuals.
2. For every discretization window P, sum the last P+1 residuals, fit an
   AR(1) to that sum over the trailing ``ou_window`` pairs, map it to OU
   parameters and emit the drift-adjusted z-score.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .market_data import GridLayout, ReturnPanel, TradingCalendar, forward_fill_returns

logger = logging.getLogger(__name__)

SIGNAL_WINDOWS = (10, 20, 30, 60, 100, 150)


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class SignalConfig:
    windows: tuple[int, ...] = SIGNAL_WINDOWS
    n_factors: int = 15
    factor_window_days: int = 5
    ou_window: int = 200
    min_ou_pairs: int | None = None

    @property
    def min_pairs(self) -> int:
        return self.min_ou_pairs if self.min_ou_pairs is not None else max(3, self.ou_window // 2)


@dataclass
class Standardized:
    """z-scored window of returns restricted to the retained stocks."""

    L: np.ndarray
    returns: np.ndarray  # raw window returns of retained stocks
    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray  # bool mask over the original N columns
    excluded: dict[int, str] = field(default_factory=dict)


def standardize_returns(returns: np.ndarray) -> Standardized:
    """Column-wise z-scores (sample std, ddof=1).

    Columns with missing values or zero variance are excluded.
    """
    r = np.asarray(returns, float)
    if r.ndim == 1:
        r = r[:, None]
    if r.shape[0] < 2:
        raise SignalError("need at least 2 observations to standardize")
    excluded: dict[int, str] = {}
    has_nan = np.isnan(r).any(axis=0)
    for j in np.flatnonzero(has_nan):
        excluded[int(j)] = "missing observations in window"
    std = np.zeros(r.shape[1])
    mean = np.zeros(r.shape[1])
    ok = ~has_nan
    mean[ok] = r[:, ok].mean(axis=0)
    std[ok] = r[:, ok].std(axis=0, ddof=1)
    # constant columns can carry rounding noise in the std
    flat = ok & ((std == 0) | (std <= 1e-13 * np.abs(mean)))
    for j in np.flatnonzero(flat):
        excluded[int(j)] = "zero variance"
    kept = ok & ~flat
    L = (r[:, kept] - mean[kept]) / std[kept]
    return Standardized(L=L, returns=r[:, kept], mean=mean[kept], std=std[kept], kept=kept, excluded=excluded)


@dataclass
class EigenportfolioSet:
    J: int
    eigenvalues: np.ndarray  # top J, descending
    spectrum: np.ndarray  # all eigenvalues, descending
    vectors: np.ndarray  # N_kept x J eigenvectors
    weights: np.ndarray  # Q = v / sigma, N_kept x J
    factor_returns: np.ndarray  # T x J
    kept: np.ndarray

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        return self.eigenvalues / self.spectrum.sum()

    @property
    def spectrum_ratio(self) -> np.ndarray:
        return self.spectrum / self.spectrum.sum()

    def factors_for(self, returns: np.ndarray) -> np.ndarray:
        """Eigenportfolio returns for rows of a full-width return matrix."""
        return np.asarray(returns, float)[:, self.kept] @ self.weights


def _fix_signs(v: np.ndarray) -> np.ndarray:
    v = v.copy()
    for j in range(v.shape[1]):
        s = v[:, j].sum()
        if abs(s) <= 1e-12 * np.abs(v[:, j]).sum():
            nz = np.flatnonzero(np.abs(v[:, j]) > 1e-15)
            flip = nz.size and v[nz[0], j] < 0
        else:
            flip = s < 0
        if flip:
            v[:, j] = -v[:, j]
    return v


def extract_factors(std: Standardized, J: int) -> EigenportfolioSet:
    L = std.L
    T, n = L.shape
    corr = L.T @ L / (T - 1)
    bad = ~np.isfinite(corr)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise SignalError(f"non-finite correlation between retained stocks {i} and {j}")
    w, v = np.linalg.eigh(corr)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    tol = max(T, n) * np.finfo(float).eps * max(w[0], 1.0) if n else 0.0
    rank = int(np.sum(w > tol))
    if J < 1 or J > rank:
        raise SignalError(f"J={J} exceeds the correlation matrix rank {rank}")
    v = _fix_signs(v[:, :J])
    Q = v / std.std[:, None]
    F = std.returns @ Q
    return EigenportfolioSet(J=J, eigenvalues=w[:J], spectrum=w, vectors=v, weights=Q, factor_returns=F, kept=std.kept)


@dataclass
class FactorFit:
    a: np.ndarray  # intercepts (per-step drift)
    b: np.ndarray  # N x J loadings
    residuals: np.ndarray  # T x N
    flagged: np.ndarray  # pseudo-inverse fallback used
    stderr: np.ndarray | None = None


def factor_regression(returns: np.ndarray, factors: np.ndarray) -> FactorFit:
    """OLS of each return column on [1, F]."""
    r = np.asarray(returns, float)
    F = np.asarray(factors, float)
    if r.ndim == 1:
        r = r[:, None]
    T, N = r.shape
    J = F.shape[1]
    if T <= J + 1:
        raise SignalError(f"window length {T} must exceed J + 1 = {J + 1}")
    X = np.column_stack([np.ones(T), F])
    coef = np.full((J + 1, N), np.nan)
    flagged = np.zeros(N, bool)
    stderr = np.full((J + 1, N), np.nan)
    col_ok = ~np.isnan(r).any(axis=0)
    groups = [(np.arange(T), np.flatnonzero(col_ok))]
    groups += [(np.flatnonzero(~np.isnan(r[:, j])), np.array([j])) for j in np.flatnonzero(~col_ok)]
    for rows, cols in groups:
        if cols.size == 0 or rows.size <= J + 1:
            continue
        Xs = X[rows]
        rank = np.linalg.matrix_rank(Xs)
        if rank < J + 1:
            coef[:, cols] = np.linalg.pinv(Xs) @ r[np.ix_(rows, cols)]
            flagged[cols] = True
            continue
        c, *_ = np.linalg.lstsq(Xs, r[np.ix_(rows, cols)], rcond=None)
        coef[:, cols] = c
        resid = r[np.ix_(rows, cols)] - Xs @ c
        s2 = (resid**2).sum(axis=0) / (rows.size - J - 1)
        xtx_inv = np.linalg.inv(Xs.T @ Xs)
        stderr[:, cols] = np.sqrt(np.outer(np.diag(xtx_inv), s2))
    resid = r - X @ np.nan_to_num(coef)
    resid[:, np.isnan(coef).any(axis=0)] = np.nan
    return FactorFit(a=coef[0], b=coef[1:].T, residuals=resid, flagged=flagged, stderr=stderr)


@dataclass
class OuEstimate:
    P: int
    c0: float
    cu: float
    eta_var: float
    n_pairs: int
    drift_a: float = 0.0

    @property
    def valid(self) -> bool:
        return bool(0.0 < self.cu < 1.0 and self.eta_var > 0 and np.isfinite(self.c0))

    @property
    def kappa(self) -> float:
        return -np.log(self.cu) if self.valid else float("nan")

    @property
    def m(self) -> float:
        return self.c0 / (1.0 - self.cu) if self.valid else float("nan")

    @property
    def sigma_P(self) -> float:
        """Studentizing scale sqrt(Var(eta) / (2 kappa))."""
        return float(np.sqrt(self.eta_var / (2.0 * self.kappa))) if self.valid else float("nan")

    @property
    def sigma(self) -> float:
        """OU diffusion volatility implied by exact discretization."""
        if not self.valid:
            return float("nan")
        return float(np.sqrt(self.eta_var * 2.0 * self.kappa / (1.0 - self.cu**2)))


def moving_sum(x: np.ndarray, P: int) -> np.ndarray:
    """Trailing inclusive sums of P+1 terms, NaN until P+1 values exist or
    whenever a NaN is inside the window."""
    x = np.asarray(x, float)
    if P < 0:
        raise ValueError("P must be non-negative")
    L = P + 1
    out = np.full(x.shape, np.nan)
    if x.shape[0] < L:
        return out
    nan = np.isnan(x)
    c = np.cumsum(np.where(nan, 0.0, x), axis=0)
    c = np.concatenate([np.zeros((1,) + x.shape[1:]), c], axis=0)
    k = np.cumsum(nan, axis=0)
    k = np.concatenate([np.zeros((1,) + x.shape[1:], dtype=k.dtype), k], axis=0)
    s = c[L:] - c[:-L]
    bad = (k[L:] - k[:-L]) > 0
    out[P:] = np.where(bad, np.nan, s)
    return out


def _ar1_from_sums(n, sx, sy, sxx, sxy, syy):
    with np.errstate(invalid="ignore", divide="ignore"):
        mx, my = sx / n, sy / n
        cxx = sxx - n * mx * mx
        cxy = sxy - n * mx * my
        cyy = syy - n * my * my
        cu = cxy / cxx
        c0 = my - cu * mx
        ssr = np.maximum(cyy - cxy * cu, 0.0)
        eta_var = ssr / (n - 1)
    return c0, cu, eta_var


def ou_estimate(residuals: np.ndarray, P: int, window: int | None = None) -> OuEstimate:
    """AR(1)/OU fit on the P+1-term residual sums, using the last ``window``
    consecutive pairs (all pairs when None)."""
    u = moving_sum(np.asarray(residuals, float).ravel(), P)
    if np.sum(~np.isnan(u)) < 2:
        raise SignalError(f"need at least P + 2 = {P + 2} residual observations")
    x, y = u[:-1], u[1:]
    if window is not None:
        x, y = x[-window:], y[-window:]
    ok = ~(np.isnan(x) | np.isnan(y))
    x, y = x[ok], y[ok]
    n = len(x)
    if n < 3:
        return OuEstimate(P, float("nan"), float("nan"), float("nan"), n)
    xm, ym = x.mean(), y.mean()
    dx, dy = x - xm, y - ym
    sxx = dx @ dx
    if sxx == 0:
        return OuEstimate(P, float("nan"), float("nan"), float("nan"), n)
    cu = (dx @ dy) / sxx
    c0 = ym - cu * xm
    eta = y - c0 - cu * x
    return OuEstimate(P, float(c0), float(cu), float(eta @ eta / (n - 1)), n)


def modified_z_score(est: OuEstimate, U_current: float) -> float:
    if not est.valid:
        return float("nan")
    z = (U_current - est.m) / est.sigma_P
    return float(z - est.drift_a / (est.kappa * est.sigma_P))


def rolling_ou(u: np.ndarray, window: int, min_pairs: int):
    """Vectorized trailing AR(1) fits of ``u[s+1]`` on ``u[s]``.

    Row t uses the pairs ending at rows t-window+1..t.  Returns
    ``(c0, cu, eta_var, valid)`` arrays shaped like ``u``.
    """
    u = np.asarray(u, float)
    x, y = u[:-1], u[1:]
    ok = ~(np.isnan(x) | np.isnan(y))
    x0, y0 = np.where(ok, x, 0.0), np.where(ok, y, 0.0)
    # shift by the first usable value per column to limit cancellation in the running sums
    first = np.argmax(ok, axis=0)
    ref = np.where(ok.any(axis=0), np.take_along_axis(np.nan_to_num(x), first[None], axis=0)[0], 0.0)
    x0 = np.where(ok, x0 - ref, 0.0)
    y0 = np.where(ok, y0 - ref, 0.0)

    def roll(a):
        c = np.concatenate([np.zeros((1,) + a.shape[1:]), np.cumsum(a, axis=0)], axis=0)
        lo = np.maximum(np.arange(1, len(a) + 1) - window, 0)
        return c[1:] - c[lo]

    n = roll(ok.astype(float))
    c0, cu, ev = _ar1_from_sums(n, roll(x0), roll(y0), roll(x0 * x0), roll(x0 * y0), roll(y0 * y0))
    # undo centering: y - ref = c0' + cu (x - ref)
    c0 = c0 + ref * (1.0 - cu)
    full = lambda a: np.concatenate([np.full((1,) + a.shape[1:], np.nan), a], axis=0)  # noqa: E731
    c0, cu, ev, n = full(c0), full(cu), full(ev), full(n)
    valid = (n >= min_pairs) & (cu > 0) & (cu < 1) & (ev > 0) & np.isfinite(c0)
    return c0, cu, ev, valid


@dataclass
class SignalPanel:
    times: np.ndarray
    tickers: list[str]
    Z: np.ndarray  # T x N x D
    missing_mask: np.ndarray
    windows: tuple[int, ...] = SIGNAL_WINDOWS
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype="datetime64[m]")
        self.Z = np.asarray(self.Z, float)
        self.missing_mask = np.asarray(self.missing_mask, bool)
        self.windows = tuple(int(w) for w in self.windows)
        T, N = len(self.times), len(self.tickers)
        if self.Z.shape != (T, N, len(self.windows)):
            raise ValueError(f"Z must be {(T, N, len(self.windows))}, got {self.Z.shape}")
        if not np.all(np.isfinite(self.Z[~self.missing_mask])):
            raise ValueError("non-finite signal outside the missing mask")
        self.Z[self.missing_mask] = np.nan

    @property
    def D(self) -> int:
        return self.Z.shape[2]


def build_signal_panel(panel: ReturnPanel, config: SignalConfig | None = None,
                       calendar: TradingCalendar | None = None) -> SignalPanel:
    cfg = config or SignalConfig()
    lay = GridLayout.from_times(panel.times, calendar)
    filled = forward_fill_returns(panel).values
    T, N = filled.shape
    resid = np.full((T, N), np.nan)
    drift = np.full((T, N), np.nan)
    skipped_days = []
    explained = []
    for d in range(cfg.factor_window_days, lay.n_days):
        win = np.flatnonzero((lay.day >= d - cfg.factor_window_days) & (lay.day < d))
        today = lay.day_rows(d)
        try:
            std = standardize_returns(filled[win])
            if std.kept.sum() <= cfg.n_factors:
                raise SignalError(f"only {int(std.kept.sum())} usable stocks for {cfg.n_factors} factors")
            fac = extract_factors(std, cfg.n_factors)
            fit = factor_regression(std.returns, fac.factor_returns)
        except SignalError as exc:
            skipped_days.append((d, str(exc)))
            continue
        explained.append(float(fac.explained_variance_ratio.sum()))
        F_today = fac.factors_for(filled[today])
        cols = np.flatnonzero(fac.kept)
        resid[np.ix_(today, cols)] = filled[np.ix_(today, cols)] - fit.a - F_today @ fit.b.T
        drift[np.ix_(today, cols)] = fit.a
    Z = np.full((T, N, len(cfg.windows)), np.nan)
    for k, P in enumerate(cfg.windows):
        U = moving_sum(resid, P)
        c0, cu, ev, valid = rolling_ou(U, cfg.ou_window, cfg.min_pairs)
        with np.errstate(invalid="ignore", divide="ignore"):
            kappa = -np.log(cu)
            m = c0 / (1.0 - cu)
            sig = np.sqrt(ev / (2.0 * kappa))
            z = (U - m) / sig - drift / (kappa * sig)
        Z[..., k] = np.where(valid, z, np.nan)
    missing = panel.missing_mask | ~np.isfinite(Z).all(axis=2)
    if skipped_days:
        logger.info("factor step skipped on %d days", len(skipped_days))
    diag = {"skipped_days": skipped_days, "mean_explained_variance": float(np.mean(explained)) if explained else None}
    return SignalPanel(panel.times, panel.tickers, Z, missing, cfg.windows, diag)

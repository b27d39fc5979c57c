"""Echo state network reservoir: fixed random weights and leaky state updates.

State recursion, shared across the cross-section::

    X_t = alpha X_{t-1} + (1 - alpha) tanh(rho A X_{t-1} + gamma C z_t)

``A`` has unit spectral radius and ``C`` unit max-abs entry.  Missing inputs
are replaced by zeros ("decay") and the resulting states are flagged so they
are never used as training rows.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

ACTIVATIONS = {
    "tanh": np.tanh,
    # test hook: reduces the reservoir to a linear map
    "identity": lambda x: x,
}

MAX_SAMPLING_ATTEMPTS = 8


class ReservoirError(ValueError):
    pass


@dataclass(frozen=True)
class ReservoirSpec:
    K: int = 100
    D: int = 6
    alpha: float = 0.0
    rho: float = 0.0
    gamma: float = 0.005
    zeta: float = 0.0
    a_sparsity: float = 0.15
    c_sparsity: float = 0.95
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ReservoirError("alpha must lie in [0, 1]")
        if not 0 <= self.rho <= 1:
            raise ReservoirError("rho must lie in [0, 1]")
        if not self.gamma > 0:
            raise ReservoirError("gamma must be positive")
        if self.zeta < 0:
            raise ReservoirError("zeta must be non-negative")
        if not (0 < self.a_sparsity <= 1 and 0 < self.c_sparsity <= 1):
            raise ReservoirError("sparsities are fractions of nonzero entries in (0, 1]")
        if self.K < 1 or self.D < 1:
            raise ReservoirError("K and D must be positive")
        if self.activation not in ACTIVATIONS:
            raise ReservoirError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "ReservoirSpec":
        return replace(self, seed=int(seed))


# tuned default specifications per horizon (K = 100 throughout)
DEFAULT_SPECS: dict[str, ReservoirSpec] = {
    "10min": ReservoirSpec(alpha=0.9, a_sparsity=0.15, rho=0.4, c_sparsity=0.95, gamma=0.005),
    "30min": ReservoirSpec(alpha=0.2, a_sparsity=0.15, rho=0.6, c_sparsity=0.55, gamma=0.005),
    "60min": ReservoirSpec(alpha=0.0, a_sparsity=0.15, rho=0.6, c_sparsity=0.75, gamma=0.005),
    "2hr": ReservoirSpec(alpha=0.0, a_sparsity=0.65, rho=0.6, c_sparsity=0.85, gamma=0.005),
    "EOD": ReservoirSpec(alpha=0.0, a_sparsity=0.35, rho=0.0, c_sparsity=0.25, gamma=0.015),
}


@dataclass(frozen=True)
class ReservoirWeights:
    A_bar: np.ndarray
    C_bar: np.ndarray
    b_bar: np.ndarray

    @property
    def K(self) -> int:
        return self.A_bar.shape[0]

    @property
    def D(self) -> int:
        return self.C_bar.shape[1]

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A_bar)))) if self.K else 0.0

    def max_singular_value(self) -> float:
        return float(np.linalg.norm(self.A_bar, 2))


def normalize_weights(A_star: np.ndarray, C_star: np.ndarray) -> ReservoirWeights:
    """Scale A* to unit spectral radius and C* to unit max-abs entry."""
    A_star = np.asarray(A_star, float)
    C_star = np.asarray(C_star, float)
    radius = np.max(np.abs(np.linalg.eigvals(A_star)))
    cmax = np.max(np.abs(C_star))
    if not radius > 0:
        raise ReservoirError("A* has zero spectral radius")
    if not cmax > 0:
        raise ReservoirError("C* is all zeros")
    return ReservoirWeights(A_star / radius, C_star / cmax, np.zeros(A_star.shape[0]))


def sample_weights(spec: ReservoirSpec) -> ReservoirWeights:
    """Sparse Gaussian A*, sparse uniform C*; resample on degenerate draws."""
    for attempt in range(MAX_SAMPLING_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        A = np.where(rng.random((spec.K, spec.K)) < spec.a_sparsity, rng.standard_normal((spec.K, spec.K)), 0.0)
        C = np.where(rng.random((spec.K, spec.D)) < spec.c_sparsity, rng.uniform(-1.0, 1.0, (spec.K, spec.D)), 0.0)
        try:
            return normalize_weights(A, C)
        except ReservoirError:
            continue
    raise ReservoirError(f"degenerate reservoir draw after {MAX_SAMPLING_ATTEMPTS} attempts (seed {spec.seed})")


def contraction_rate(weights: ReservoirWeights, spec: ReservoirSpec) -> float:
    """Upper bound on the zero-input Lipschitz constant of one tanh update."""
    return spec.alpha + (1.0 - spec.alpha) * spec.rho * weights.max_singular_value()


def _step(X, weights: ReservoirWeights, spec: ReservoirSpec, z):
    act = ACTIVATIONS[spec.activation]
    pre = spec.rho * (X @ weights.A_bar.T) + spec.gamma * (z @ weights.C_bar.T)
    if spec.zeta:
        pre = pre + spec.zeta * weights.b_bar
    return spec.alpha * X + (1.0 - spec.alpha) * act(pre)


@dataclass
class ReservoirState:
    X: np.ndarray
    last_update: object = None
    decayed_steps: int = 0


def update_state(state: ReservoirState, weights: ReservoirWeights, spec: ReservoirSpec, z, when=None) -> ReservoirState:
    """One update; ``z=None`` or an all-NaN vector is a decay step."""
    X = np.asarray(state.X, float)
    if X.shape[-1] != weights.K:
        raise ReservoirError(f"state dimension {X.shape[-1]} does not match K={weights.K}")
    if z is None or np.all(np.isnan(np.asarray(z, float))):
        return ReservoirState(_step(X, weights, spec, np.zeros(weights.D)), when, state.decayed_steps + 1)
    z = np.asarray(z, float)
    if not np.all(np.isfinite(z)):
        raise ReservoirError("input has non-finite entries; mark the whole vector missing instead")
    return ReservoirState(_step(X, weights, spec, z), when, 0)


def run_state_sequence(weights: ReservoirWeights, spec: ReservoirSpec, inputs: np.ndarray,
                       X0: np.ndarray | None = None, missing: np.ndarray | None = None):
    """Iterate the reservoir over ``inputs`` (T x D, or T x N x D for a panel).

    Rows with any NaN (or flagged in ``missing``) are decay steps.  Returns
    ``(states, valid)`` where ``valid`` is False on decay steps.
    """
    Z = np.asarray(inputs, float)
    single = Z.ndim == 2
    if single:
        Z = Z[:, None, :]
    T, N, D = Z.shape
    if D != weights.D:
        raise ReservoirError(f"input dimension {D} does not match D={weights.D}")
    miss = np.isnan(Z).any(axis=2)
    if missing is not None:
        miss = miss | np.asarray(missing, bool).reshape(T, N)
    Zin = np.where(miss[..., None], 0.0, Z)
    X = np.zeros((N, weights.K)) if X0 is None else np.broadcast_to(np.asarray(X0, float), (N, weights.K)).copy()
    states = np.empty((T, N, weights.K))
    for t in range(T):
        X = _step(X, weights, spec, Zin[t])
        states[t] = X
    valid = ~miss
    if single:
        return states[:, 0], valid[:, 0]
    return states, valid

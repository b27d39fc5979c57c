import numpy as np
import pytest

from esn_intraday.synthetic import SyntheticMarketSpec, ou_step_params, simulate_ou, simulate_panel


def test_deterministic_limit_returns_equal_drift():
    spec = SyntheticMarketSpec(N=3, J=2, T=200, a=[1e-4, -2e-4, 0.0], B=np.ones((3, 2)), factor_vol=1e-300,
                               kappa=0.5, m=0.1, sigma=1e-300)
    p = simulate_panel(spec)
    assert np.allclose(p.values, spec.a, rtol=0, atol=1e-250)


def test_no_missing_when_rate_zero():
    p = simulate_panel(SyntheticMarketSpec.random(5, 1, T=100, seed=2))
    assert not p.missing_mask.any()


def test_missing_rate_is_respected():
    p = simulate_panel(SyntheticMarketSpec.random(50, 1, T=2000, missing_rate=0.1, seed=2))
    assert p.missing_mask.mean() == pytest.approx(0.1, abs=0.01)


def test_seed_determinism():
    spec = SyntheticMarketSpec.random(10, 2, n_days=3, missing_rate=0.05, seed=11)
    a, b = simulate_panel(spec), simulate_panel(spec)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.missing_mask.tobytes() == b.missing_mask.tobytes()


def test_components_reconstruct_returns():
    spec = SyntheticMarketSpec.random(4, 2, T=300, drift_scale=1e-4, seed=5)
    p, F, U = simulate_panel(spec, return_components=True)
    dU = np.diff(np.vstack([U[:1] * np.nan, U]), axis=0)
    r = spec.a + F @ spec.B.T + dU
    assert np.allclose(p.values[1:], r[1:], rtol=1e-12, atol=1e-18)


@pytest.mark.parametrize("kappa", [0.05, 0.5])
def test_increment_autocovariance_matches_closed_form(kappa):
    sigma, T = 1.0, 100_000
    U = simulate_ou(kappa, 0.0, sigma, T + 1, rng=7)
    dU = np.diff(U)
    c1 = np.mean((dU[1:] - dU.mean()) * (dU[:-1] - dU.mean()))
    phi = np.exp(-kappa)
    V = sigma**2 / (2 * kappa)
    expected = -V * (1 - phi) ** 2  # gamma(1) - gamma(0) - gamma(2) + gamma(1)
    assert c1 < 0
    assert c1 == pytest.approx(expected, rel=0.1)


def test_stationary_variance():
    kappa, sigma = 0.2, 2e-3
    U = simulate_ou(kappa, 0.3, sigma, 100_000, rng=1)
    assert np.var(U) == pytest.approx(sigma**2 / (2 * kappa), rel=0.05)


def test_zero_drift_means_within_three_sigma():
    spec = SyntheticMarketSpec.random(20, 0, T=20_000, kappa=0.5, sigma=1e-3, seed=9)
    p = simulate_panel(spec)
    # increments telescope: mean = (U_T - U_0)/T, whose std is sqrt(2V)/T
    band = 3 * np.sqrt(2 * 1e-6 / 1.0) / 20_000
    assert np.all(np.abs(p.values.mean(axis=0)) < band)


def test_exact_step_parameters():
    phi, innov = ou_step_params(0.3, 2.0)
    assert phi == pytest.approx(np.exp(-0.3))
    assert innov**2 == pytest.approx(4.0 * (1 - np.exp(-0.6)) / 0.6)


@pytest.mark.parametrize("bad", [dict(kappa=0.0), dict(sigma=-1.0), dict(missing_rate=1.0), dict(factor_vol=0.0)])
def test_invalid_specs_rejected(bad):
    kw = dict(N=2, J=1, T=10, a=0.0, B=np.ones((2, 1)), factor_vol=1.0, kappa=0.5, m=0.0, sigma=1.0)
    kw.update(bad)
    with pytest.raises(ValueError):
        SyntheticMarketSpec(**kw)


def test_burn_in_scales_with_slowest_reversion():
    spec = SyntheticMarketSpec.random(2, 1, T=10, kappa=[0.5, 0.05])
    assert spec.burn_in_steps() == 200

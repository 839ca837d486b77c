import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import curve_fit

from motcorr.atomic import CESIUM_D2, TWO_LEVEL
from motcorr.field import FieldConfig
from motcorr.fitting import (ExponentialRelaxation, FitError, PowerLaw, RabiOscillation, contrast_vs_N,
                             estimate_temperature, fit_exponential, fit_power_law, fit_rabi)
from motcorr.trajectory import MotionModel, TrapEnvironment, simulate_atoms, steady_state_excited, two_level_g2_oracle

G = TWO_LEVEL.gamma


def noisy_exp(A, tau, sigma, seed, lags=None):
    lags = np.linspace(0.05e-6, 20e-6, 200) if lags is None else lags
    rng = np.random.default_rng(seed)
    y = 1 + A * np.exp(-lags / tau) + rng.normal(0, sigma, lags.size)
    return lags, y, np.full(lags.size, sigma)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_exponential_recovery(seed):
    x, y, e = noisy_exp(-0.62, 2e-6, 0.02, seed)
    f = fit_exponential((x, y, e))
    assert abs(f.A + 0.62) < 2 * f.sigma_A
    assert abs(f.tau_r - 2e-6) < 2 * f.sigma_tau
    assert f.converged


def test_exponential_matches_curve_fit():
    x, y, e = noisy_exp(-0.62, 2e-6, 0.02, 5)
    f = fit_exponential((x, y, e))
    p, c = curve_fit(lambda t, A, tau: 1 + A * np.exp(-t / tau), x, y, p0=[-0.5, 1e-6], sigma=e,
                     absolute_sigma=True)
    assert f.A == pytest.approx(p[0], rel=1e-6)
    assert f.tau_r == pytest.approx(p[1], rel=1e-6)
    assert f.sigma_tau == pytest.approx(np.sqrt(c[1, 1]), rel=1e-3)


def test_intensity_correlation_time():
    x, y, e = noisy_exp(0.5, 0.6e-6, 0.02, 3, np.linspace(0.02e-6, 5e-6, 200))
    f = fit_exponential((x, y, e))
    assert abs(f.tau_r - 0.6e-6) < 2 * f.sigma_tau


def test_flat_data_degenerate():
    x, y, e = noisy_exp(0.0, 2e-6, 0.02, 4)
    f = fit_exponential((x, y, e))
    assert abs(f.A) < 2 * f.sigma_A
    assert "degenerate" in f.flags


def test_free_baseline():
    x, y, e = noisy_exp(-0.3, 5e-6, 0.01, 6)
    y = y + 0.03
    f = fit_exponential((x, y, e), baseline=None)
    assert f.baseline == pytest.approx(1.03, abs=0.01)
    assert abs(f.tau_r - 5e-6) < 3 * f.sigma_tau


def test_too_few_points():
    with pytest.raises(ValueError):
        fit_exponential((np.arange(5.0), np.ones(5)))


def test_exponential_estimator():
    x, y, e = noisy_exp(-0.4, 3e-6, 0.01, 7)
    est = ExponentialRelaxation().fit(x, y, sigma=e)
    assert est.tau_r_ == pytest.approx(3e-6, rel=0.1)
    assert est.score(x, y) > 0.9


def test_rabi_exact_recovery():
    tau = np.linspace(0.01 / G, 6 / G, 300)
    y = two_level_g2_oracle(2 * G, -G, G, tau)
    f = fit_rabi((tau, y), G)
    assert f.omega / G == pytest.approx(2.0, abs=1e-6)
    assert f.delta / G == pytest.approx(1.0, abs=1e-6)
    assert not f.monotonic


def test_rabi_overdamped_flag():
    tau = np.linspace(0.01 / G, 20 / G, 300)
    y = two_level_g2_oracle(0.1 * G, 0.0, G, tau)
    f = fit_rabi((tau, y), G)
    assert f.monotonic


def test_rabi_on_mcwf_ensemble():
    # s = 2 on resonance: Omega = Gamma sqrt(s/2) = Gamma
    env = TrapEnvironment(FieldConfig(k=TWO_LEVEL.k, intensity=2.0, detuning=0.0, uniform_field=(0, 0, 1)), None)
    dt = 0.02 / G
    res = simulate_atoms(TWO_LEVEL, env, MotionModel("static"), 6 / G, n_atoms=4000, seed=8, dt=dt,
                         sample_every=dt, initial_m=0)
    rss = steady_state_excited(G, 0.0, G)
    g2 = res.rho_ee.mean(0) / rss
    se = np.maximum(res.rho_ee.std(0) / np.sqrt(4000) / rss, 1e-3)
    f = fit_rabi((res.sample_times[1:], g2[1:], se[1:]), G)
    assert f.omega / G == pytest.approx(1.0, rel=0.1)


def test_rabi_estimator():
    tau = np.linspace(0.01 / G, 6 / G, 200)
    est = RabiOscillation(gamma=G).fit(tau, two_level_g2_oracle(1.5 * G, 0.0, G, tau))
    assert est.omega_ / G == pytest.approx(1.5, abs=1e-5)


def test_contrast_vs_N_exact():
    class F:
        def __init__(self, c):
            self.contrast, self.sigma_A, self.tau_r, self.sigma_tau = c, 0.01 * c, 2e-6, 1e-7

    sc = contrast_vs_N([1, 2, 3, 4], [F(1 / n) for n in (1, 2, 3, 4)])
    assert sc.slope == pytest.approx(-1.0, abs=1e-12)
    assert sc.tau_p == pytest.approx(1.0)


def test_power_law_exact():
    L = np.array([0.1, 0.2, 0.4, 0.8, 1.6])
    f = fit_power_law(L, 3e-6 * L ** -0.5, 0.02 * 3e-6 * L ** -0.5)
    assert f.alpha == pytest.approx(-0.5, abs=1e-4)


@given(alpha=st.floats(-2, 2), c=st.floats(1e-3, 1e3))
def test_power_law_property(alpha, c):
    x = np.geomspace(0.1, 10, 6)
    assert fit_power_law(x, c * x ** alpha).alpha == pytest.approx(alpha, abs=1e-9)


def test_power_law_outlier_inflates_error():
    rng = np.random.default_rng(0)
    L = np.geomspace(0.1, 1.6, 6)
    tau = 3e-6 * L ** -0.5 * (1 + rng.normal(0, 0.02, 6))
    err = 0.02 * tau
    clean = fit_power_law(L, tau, err)
    tau2 = tau.copy()
    tau2[2] *= 1.5
    dirty = fit_power_law(L, tau2, err)
    assert dirty.alpha_err > clean.alpha_err
    assert abs(dirty.alpha - clean.alpha) < 3 * dirty.alpha_err


def test_power_law_estimator():
    x = np.geomspace(0.1, 10, 8)
    est = PowerLaw().fit(x, 2 * x ** -0.5)
    assert est.alpha_ == pytest.approx(-0.5)


def test_temperature_endpoints():
    assert estimate_temperature(6.53e-6, CESIUM_D2) * 1e6 == pytest.approx(68.09, abs=0.05)
    assert estimate_temperature(17e-6, CESIUM_D2) * 1e6 == pytest.approx(10.05, abs=0.05)


@given(st.floats(1e-7, 1e-3))
def test_temperature_scaling(tau):
    assert estimate_temperature(tau / 2, CESIUM_D2) == pytest.approx(4 * estimate_temperature(tau, CESIUM_D2))


def test_temperature_conventions():
    t1 = estimate_temperature(10e-6, CESIUM_D2, "rms1d")
    assert estimate_temperature(10e-6, CESIUM_D2, "rms3d") == pytest.approx(t1 / 3)
    assert estimate_temperature(10e-6, CESIUM_D2, "mean3d") == pytest.approx(t1 * np.pi / 8)
    with pytest.raises(ValueError):
        estimate_temperature(10e-6, CESIUM_D2, "median")

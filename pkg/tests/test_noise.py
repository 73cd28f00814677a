import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from ddspec import units
from ddspec.errors import DomainError, ResolutionError, UnsupportedModelError
from ddspec.noise import (
    SpectralModel,
    autocorrelation,
    evaluate_psd,
    omega_psd,
    sample_trajectory,
)
from ddspec.rng import derive_seed, stream

positive = st.floats(1e-2, 1e2)


def test_dense_bath_zero_frequency_value(dense_bath):
    assert evaluate_psd(dense_bath, 0.0) == pytest.approx(2 / np.pi * 2.46**2 * (2.54 + 0.25))
    assert evaluate_psd(dense_bath, 0.0) == pytest.approx(10.75, abs=0.005)


def test_half_width_of_slow_component():
    m = SpectralModel.single_lorentzian(2.46, 2.54)
    s0 = evaluate_psd(m, 0.0)
    assert evaluate_psd(m, 1 / (2 * np.pi * 2.54)) == pytest.approx(s0 / 2, rel=1e-12)


@given(b=positive, tau=positive)
def test_single_lorentzian_decreases_to_zero(b, tau):
    m = SpectralModel.single_lorentzian(b, tau)
    nu = np.geomspace(1e-6, 1e8, 200)
    s = evaluate_psd(m, nu)
    assert np.all(s >= 0)
    assert np.all(np.diff(s) <= 0)
    assert s[-1] < 1e-12 * s[0]


@given(b=positive, ts=positive, ratio=st.floats(1.0, 1e3))
def test_psd_integral_is_b_squared_per_component(b, ts, ratio):
    m = SpectralModel.double_lorentzian(b, ts, ts / ratio)
    # integral over angular frequency 2 pi nu, one component at a time
    for tc in (ts, ts / ratio):
        one = SpectralModel.single_lorentzian(b, tc)
        assert _integral(one, [1 / tc]) == pytest.approx(b**2, rel=1e-6)
    assert _integral(m, [ratio / ts, 1 / ts]) == pytest.approx(2 * b**2, rel=1e-6)


def _integral(model, knees):
    # log-frequency substitution; both ends lie far beyond the knees
    lo, hi = np.log(min(knees) * 1e-9), np.log(max(knees) * 1e13)
    pts = sorted(np.log(knees))
    val, _ = integrate.quad(lambda u: evaluate_psd(model, np.exp(u) / units.TWO_PI) * np.exp(u),
                            lo, hi, points=pts, limit=500, epsrel=1e-10)
    return val


def test_omega_psd_matches_display_conversion(dense_bath):
    nu = np.geomspace(1e-3, 10, 7)
    assert np.allclose(omega_psd(dense_bath, 2 * np.pi * nu), units.DISPLAY_FACTOR * evaluate_psd(dense_bath, nu))


def test_psd_domain_errors():
    with pytest.raises(DomainError):
        evaluate_psd(SpectralModel.single_lorentzian(1, 1), -1.0)
    with pytest.raises(DomainError):
        evaluate_psd(SpectralModel.power_law(1.0, 1.2), 0.0)
    with pytest.raises(DomainError):
        SpectralModel.double_lorentzian(1.0, 0.1, 1.0)
    with pytest.raises(DomainError):
        SpectralModel.single_lorentzian(-1.0, 1.0)


def test_power_law_values():
    m = SpectralModel.power_law(2.0, 1.5)
    assert evaluate_psd(m, 4.0) == pytest.approx(2.0 / 8.0)


def test_autocorrelation_examples(dense_bath):
    assert autocorrelation(dense_bath, 0.0) == pytest.approx(2 * 2.46**2)
    assert autocorrelation(dense_bath, 0.0) == pytest.approx(12.10, abs=0.005)
    m = SpectralModel.single_lorentzian(1.7, 0.8)
    assert autocorrelation(m, 0.8) == pytest.approx(np.exp(-1) * 1.7**2)
    assert autocorrelation(m, 1e4) == pytest.approx(0.0, abs=1e-300)
    assert autocorrelation(m, 0.3, angular=True) == pytest.approx((2 * np.pi) ** 2 * autocorrelation(m, 0.3))
    with pytest.raises(UnsupportedModelError):
        autocorrelation(SpectralModel.power_law(1.0, 1.0), 0.0)
    with pytest.raises(DomainError):
        autocorrelation(m, -1.0)


def test_zero_amplitude_trajectory_is_zero():
    tr = sample_trajectory(SpectralModel.single_lorentzian(0.0, 1.0), 0.01, 5.0, seed=3)
    assert np.all(tr.samples == 0.0)


def test_trajectory_is_deterministic_and_uniform():
    m = SpectralModel.single_lorentzian(1.0, 1.0)
    a = sample_trajectory(m, 0.01, 20.0, seed=5)
    b = sample_trajectory(m, 0.01, 20.0, seed=5)
    c = sample_trajectory(m, 0.01, 20.0, seed=6)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    assert np.allclose(np.diff(a.times), 0.01)
    assert a.duration == pytest.approx(len(a.samples) * a.dt)


def test_lag_one_autocorrelation():
    m = SpectralModel.single_lorentzian(1.0, 1.0)
    x = sample_trajectory(m, 0.01, 1e4, seed=11).samples
    x = x - x.mean()
    r1 = np.dot(x[:-1], x[1:]) / np.dot(x, x)
    rho = np.exp(-0.01)
    # large-sample standard error of the lag-1 coefficient of an AR(1) process
    se = np.sqrt((1 - rho**2) / len(x))
    assert abs(r1 - rho) < 3 * se


def test_trajectory_moments():
    m = SpectralModel.single_lorentzian(1.0, 0.1)
    x = sample_trajectory(m, 0.005, 2e3, seed=2).samples
    var = (2 * np.pi) ** 2
    n_ind = 2e3 / (2 * 0.1)  # independent blocks
    assert abs(x.mean()) < 3 * np.sqrt(var / n_ind)
    assert x.var() == pytest.approx(var, rel=3 * np.sqrt(2 / n_ind))
    assert abs(stats.skew(x)) < 3 * np.sqrt(6 / n_ind)
    assert abs(stats.kurtosis(x)) < 3 * np.sqrt(24 / n_ind)


def test_resolution_and_model_guards():
    with pytest.raises(ResolutionError):
        sample_trajectory(SpectralModel.single_lorentzian(1, 0.05), 0.01, 1.0, seed=0)
    with pytest.raises(UnsupportedModelError):
        sample_trajectory(SpectralModel.power_law(1.0, 1.0), 0.01, 1.0, seed=0)


def test_periodogram_matches_psd():
    m = SpectralModel.single_lorentzian(1.0, 1.0)
    dt, dur, seeds = 0.01, 200.0, 100
    per = []
    for s in range(seeds):
        x = sample_trajectory(m, dt, dur, seed=s).samples
        f = np.fft.rfftfreq(len(x), dt)
        p = 2 * dt / len(x) * np.abs(np.fft.rfft(x)) ** 2
        per.append(units.periodogram_to_display(p))
    per = np.array(per)
    keep = (f >= 5 / dur) & (f <= 1 / (40 * dt))
    f, per = f[keep], per[:, keep]
    edges = np.geomspace(f[0], f[-1] * 1.0001, 15)
    idx = np.digitize(f, edges)
    for k in np.unique(idx):
        sel = idx == k
        est = per[:, sel].mean(axis=1)
        truth = evaluate_psd(m, f[sel]).mean()
        assert abs(est.mean() - truth) < 3 * est.std(ddof=1) / np.sqrt(seeds)


def test_double_lorentzian_is_sum_of_components():
    m = SpectralModel.double_lorentzian(1.0, 1.0, 0.1)
    tr = sample_trajectory(m, 0.005, 2e3, seed=4, keep_components=True)
    slow, fast = tr.components
    assert np.allclose(slow + fast, tr.samples)
    var = (2 * np.pi) ** 2
    assert slow.var() == pytest.approx(var, rel=0.15)
    assert fast.var() == pytest.approx(var, rel=0.05)
    assert tr.samples.var() == pytest.approx(2 * var, rel=0.1)
    assert abs(np.corrcoef(slow, fast)[0, 1]) < 0.05


def test_trajectory_csv(tmp_path):
    from ddspec.io import read_csv

    tr = sample_trajectory(SpectralModel.single_lorentzian(1, 1), 0.05, 1.0, seed=1)
    tr.to_csv(tmp_path / "t.csv")
    cols = read_csv(tmp_path / "t.csv")
    assert list(cols) == ["t_s", "xi_rad_per_s"]
    assert np.array_equal(cols["xi_rad_per_s"], tr.samples)


def test_model_dict_round_trip(dense_bath):
    assert SpectralModel.from_dict(dense_bath.to_dict()) == dense_bath


def test_seed_derivation():
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
    assert derive_seed(1, "a") != derive_seed(2, "a")
    assert np.array_equal(stream(3, "x").random(4), stream(3, "x").random(4))

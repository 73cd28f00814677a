import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddspec.bath import (
    BathConfig,
    CorrelationCurve,
    build_bath,
    estimate_autocorrelation,
    evolve,
    fit_correlation_time,
    replay_magnetization,
)
from ddspec.errors import EstimationError, FitError, GeometryError, IsolatedSpinWarning
from ddspec.noise import SpectralModel, sample_trajectory


def two_spins(rate_fast=2.0, occupations=(1, -1), scale=1.0):
    cfg = BathConfig(n_spins=2, coupling_scale=scale, frozen_core_radius=0.5,
                     rate_slow=0.1, rate_fast=rate_fast)
    st_ = build_bath(cfg, positions=[[2.0, 0, 0], [2.5, 0, 0]])
    return st_.with_occupations(occupations)


def test_forced_pair_outside_core():
    s = two_spins()
    assert s.pairs.tolist() == [[0, 1]]
    assert s.rates.tolist() == [2.0]


def test_coupling_formula():
    cfg = BathConfig(n_spins=2, coupling_scale=10.0)
    s = build_bath(cfg, positions=[[1.0, 0, 0], [0, 1.2, 0]])
    assert s.couplings[0] == pytest.approx(2 * np.pi * 10.0)


def test_build_is_deterministic():
    cfg = BathConfig(n_spins=1000, seed=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IsolatedSpinWarning)
        a, b = build_bath(cfg), build_bath(cfg)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.occupations, b.occupations)
    assert np.array_equal(a.pairs, b.pairs)


def test_default_bath_invariants():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IsolatedSpinWarning)
        s = build_bath(BathConfig())
    d = np.linalg.norm(s.positions[s.pairs[:, 0]] - s.positions[s.pairs[:, 1]], axis=1)
    assert np.all(d <= s.config.pairing_cutoff)
    slow = s.in_core[s.pairs[:, 0]] | s.in_core[s.pairs[:, 1]]
    assert np.all(s.rates[slow] == s.config.rate_slow)
    assert np.all(s.rates[~slow] == s.config.rate_fast)
    assert set(np.unique(s.occupations)) <= {-1, 1}


def test_geometry_error_and_isolated_warning():
    with pytest.raises(GeometryError):
        build_bath(BathConfig(n_spins=2), positions=[[0.05, 0, 0], [1, 0, 0]])
    with pytest.warns(IsolatedSpinWarning):
        build_bath(BathConfig(n_spins=2, pairing_cutoff=0.5), positions=[[1, 0, 0], [3, 0, 0]])


def test_cubic_lattice_geometry():
    s = build_bath(BathConfig(n_spins=26, geometry="cubic-lattice", density=1.0, pairing_cutoff=1.01))
    r = np.linalg.norm(s.positions, axis=1)
    assert r.min() == pytest.approx(1.0)
    assert len(s.positions) == 26


def test_config_validation():
    from ddspec.errors import DomainError

    with pytest.raises(DomainError):
        BathConfig(rate_slow=3.0, rate_fast=1.0)
    with pytest.raises(DomainError):
        BathConfig(n_spins=1)
    assert BathConfig.from_dict(BathConfig().to_dict()) == BathConfig()


def test_single_pair_waiting_time():
    s = two_spins(rate_fast=3.0)
    tr = evolve(s, 4000.0, 1.0, seed=1)
    waits = np.diff(np.concatenate([[0.0], tr.event_t]))
    assert len(waits) >= 10_000
    assert abs(waits.mean() - 1 / 3.0) < 3 * waits.std(ddof=1) / np.sqrt(len(waits))


def test_telegraph_autocorrelation():
    r = 1.5
    s = two_spins(rate_fast=r, scale=1.0)
    tr = evolve(s, 20_000.0, 0.02, seed=3, record_events=False)
    curve = estimate_autocorrelation(tr, 2.0)
    expected = curve.values[0] * np.exp(-2 * r * curve.lags)
    assert np.all(np.abs(curve.values - expected) <= 3 * curve.sigma + 1e-12)


def test_aligned_pairs_are_frozen():
    s = two_spins(occupations=(1, 1))
    tr = evolve(s, 100.0, 0.1, seed=2)
    assert len(tr.event_t) == 0
    assert np.all(tr.samples == tr.samples[0])


@given(seed=st.integers(0, 2**32))
def test_magnetization_conserved_at_every_event(seed):
    cfg = BathConfig(n_spins=60, density=1.0, seed=seed % 1000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IsolatedSpinWarning)
        s = build_bath(cfg)
    tr = evolve(s, 30.0, 0.5, seed=seed)
    m = replay_magnetization(tr.initial_occupations, tr.event_i, tr.event_j)
    assert np.all(m == s.magnetization)
    assert tr.final_state.magnetization == s.magnetization


def test_replay_detects_bad_log():
    from ddspec.errors import DomainError

    with pytest.raises(DomainError):
        replay_magnetization([1, 1], [0], [1])


def test_evolve_is_deterministic():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IsolatedSpinWarning)
        s = build_bath(BathConfig(n_spins=100))
    a = evolve(s, 50.0, 0.1, seed=8)
    b = evolve(s, 50.0, 0.1, seed=8)
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.event_t, b.event_t)


def test_autocorrelation_of_white_input():
    rng = np.random.default_rng(0)
    tr = sample_trajectory(SpectralModel.single_lorentzian(0, 1), 0.01, 1, seed=0)
    tr = type(tr)(tr.dt, rng.standard_normal(50_000), 0, "white", None)
    curve = estimate_autocorrelation(tr, 0.2)
    assert curve.values[0] == pytest.approx(tr.samples.var(), rel=1e-3)
    assert np.all(np.abs(curve.values[1:]) <= 3 * curve.sigma[1:])


def test_autocorrelation_of_ou_input():
    m = SpectralModel.single_lorentzian(1.0, 2.54)
    tr = sample_trajectory(m, 0.05, 20_000.0, seed=7)
    curve = estimate_autocorrelation(tr, 10.0)
    truth = curve.values[0] * np.exp(-curve.lags / 2.54)
    assert np.mean(np.abs(curve.values - truth) <= 3 * curve.sigma) > 0.95
    fit = fit_correlation_time(curve)
    assert abs(fit.tau_c - 2.54) < max(3 * fit.sigma_tau_c, 0.25)


def test_autocorrelation_guards():
    tr = sample_trajectory(SpectralModel.single_lorentzian(1, 1), 0.1, 10.0, seed=0)
    with pytest.raises(EstimationError):
        estimate_autocorrelation(tr, 5.0)


def test_correlation_fit_examples():
    lags = np.linspace(0, 10, 60)
    fit = fit_correlation_time(CorrelationCurve(lags, 3.0 * np.exp(-lags / 2.54), np.zeros(60)))
    assert fit.tau_c == pytest.approx(2.54, rel=1e-9)
    assert fit.amplitude == pytest.approx(3.0, rel=1e-9)
    with pytest.raises(FitError):
        fit_correlation_time(CorrelationCurve(lags, np.ones(60), np.zeros(60)))


def test_two_rate_bath_prefers_two_exponentials():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IsolatedSpinWarning)
        s = build_bath(BathConfig())
    tr = evolve(s, 2000.0, 0.02, seed=5, record_events=False)
    fit = fit_correlation_time(estimate_autocorrelation(tr, 20.0))
    assert fit.two_exp_residual_norm < 0.5 * fit.residual_norm


def test_trajectory_exports(tmp_path):
    from ddspec.io import read_csv

    tr = evolve(two_spins(), 10.0, 0.5, seed=1)
    tr.to_csv(tmp_path / "f.csv")
    tr.events_to_csv(tmp_path / "e.csv")
    assert list(read_csv(tmp_path / "f.csv")) == ["t_s", "xi_rad_per_s"]
    ev = read_csv(tmp_path / "e.csv")
    assert list(ev) == ["t_s", "i", "j"]
    assert len(ev["t_s"]) == len(tr.event_t)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddspec import units
from ddspec.errors import DomainError, InsensitiveConfigurationError, SamplingDensityError
from ddspec.magnetometry import (
    REFERENCE_DELTA_PHI,
    REFERENCE_REPEATS,
    REFERENCE_SLOPE,
    REFERENCE_TAU,
    SensingRun,
    SensorConfig,
    echo_phase,
    echo_phase_quadrature,
    fit_response,
    low_frequency_scenario,
    reference_sensor,
    response_factor,
    sensitivity,
    simulate_sweep,
)

UT = units.MICROTESLA


@given(tau=st.floats(1e-3, 10), b=st.floats(-1e-5, 1e-5), s1=st.floats(-1e7, 1e7))
def test_integral_convention_matches_quadrature(tau, b, s1):
    sensor = SensorConfig(S1=s1, T2=1.0)
    ref = echo_phase_quadrature(sensor, tau, b)
    assert echo_phase(sensor, tau, b) == pytest.approx(ref, rel=1e-10, abs=1e-300)


def test_phase_offset_follows_cosine():
    sensor = SensorConfig(S1=1e6, T2=1.0)
    for off in (0.3, np.pi / 2, 2.0):
        ref = echo_phase_quadrature(sensor, 0.5, 1e-6, phase_offset=off)
        assert echo_phase(sensor, 0.5, 1e-6, phase_offset=off) == pytest.approx(ref, rel=1e-9, abs=1e-15)


def test_conventions():
    assert response_factor("integral") == pytest.approx(4 / np.pi)
    assert response_factor("printed") == pytest.approx(np.pi)
    with pytest.raises(DomainError):
        response_factor("other")


def test_reference_sensor_back_solves_s1():
    for conv in ("integral", "printed"):
        s = reference_sensor(conv)
        assert response_factor(conv) * REFERENCE_TAU * s.S1 == pytest.approx(REFERENCE_SLOPE)
    # the printed prefactor corresponds to 1.6135 rad/s per microtesla
    assert reference_sensor("printed").S1 * UT == pytest.approx(1.6135, rel=1e-4)


def test_run_properties():
    run = simulate_sweep(reference_sensor(), REFERENCE_TAU, np.linspace(0, 2, 9) * UT, repeats=4)
    assert run.nu_op == pytest.approx(0.7508, abs=1e-4)
    assert run.T_total == pytest.approx(4 * 2 * 0.666)
    assert run.R == pytest.approx(np.exp(-2 * 0.666 / 1.44))
    assert np.allclose(run.X**2 + run.Y**2, 1.0)


def test_noiseless_sweep_recovers_slope_exactly():
    run = simulate_sweep(reference_sensor(), REFERENCE_TAU, np.linspace(0, 2, 41) * UT)
    slope, sigma, resid = fit_response(run)
    assert slope == pytest.approx(REFERENCE_SLOPE, rel=1e-12)
    assert np.max(np.abs(resid)) < 1e-10


def test_unwrapping_across_several_turns():
    # 2 uT spans about 6.75 rad, so the raw phase wraps once
    run = simulate_sweep(reference_sensor(), REFERENCE_TAU, np.linspace(-2, 2, 81) * UT)
    assert np.ptp(run.phi) > np.pi
    assert fit_response(run).slope == pytest.approx(REFERENCE_SLOPE, rel=1e-12)


def test_noisy_slope_recovery_is_unbiased():
    sensor = reference_sensor()
    slopes = []
    for seed in range(200):
        run = simulate_sweep(sensor, REFERENCE_TAU, np.linspace(0, 2, 81) * UT, sigma=0.032,
                             seed=seed, repeats=REFERENCE_REPEATS)
        slopes.append(fit_response(run).slope)
    slopes = np.array(slopes)
    assert abs(slopes.mean() / REFERENCE_SLOPE - 1) < 4 * slopes.std() / REFERENCE_SLOPE / np.sqrt(200)
    assert slopes.std() / REFERENCE_SLOPE < 0.01


def test_reported_slope_error_is_calibrated():
    sensor = reference_sensor()
    pulls = []
    for seed in range(200):
        run = simulate_sweep(sensor, REFERENCE_TAU, np.linspace(0, 2, 81) * UT, sigma=0.032, seed=seed)
        fit = fit_response(run)
        pulls.append((fit.slope - REFERENCE_SLOPE) / fit.sigma_slope)
    assert np.std(pulls) == pytest.approx(1.0, abs=0.15)


def test_sampling_guards():
    sensor = reference_sensor()
    with pytest.raises(SamplingDensityError):
        fit_response(simulate_sweep(sensor, REFERENCE_TAU, np.linspace(0, 1, 4) * UT))
    # steps of about 3 rad between points are ambiguous
    with pytest.raises(SamplingDensityError):
        fit_response(simulate_sweep(sensor, REFERENCE_TAU, np.linspace(0, 7, 8) * UT))
    with pytest.raises(SamplingDensityError):
        fit_response(simulate_sweep(sensor, REFERENCE_TAU, np.full(6, UT)))


def test_reference_sensitivity():
    db, eta = sensitivity(REFERENCE_DELTA_PHI, REFERENCE_SLOPE, REFERENCE_REPEATS * 2 * REFERENCE_TAU)
    assert db / units.NANOTESLA == pytest.approx(4.739, abs=1e-3)
    assert db / units.NANOTESLA == pytest.approx(4.7, abs=0.05)
    assert eta / units.NANOTESLA == pytest.approx(10.94, abs=0.01)


def test_sensitivity_guards():
    with pytest.raises(InsensitiveConfigurationError):
        sensitivity(0.016, 0.0, 1.0)
    with pytest.raises(DomainError):
        sensitivity(0.016, -1.0, 1.0)
    with pytest.raises(DomainError):
        sensitivity(-0.016, 1.0, 1.0)
    with pytest.raises(DomainError):
        sensitivity(0.016, 1.0, 0.0)


def test_zefoz_point_is_insensitive():
    sensor = SensorConfig(S1=0.0, T2=10.0, working_point_tag="ZEFOZ-near")
    run = simulate_sweep(sensor, 0.5, np.linspace(0, 2, 11) * UT)
    fit = fit_response(run)
    assert fit.slope == 0.0
    with pytest.raises(InsensitiveConfigurationError):
        sensitivity(0.016, fit.slope, run.T_total)


@given(s1=st.floats(1e3, 1e8), tau=st.floats(0.01, 5.0), dphi=st.floats(1e-4, 0.1))
def test_sensitivity_scalings(s1, tau, dphi):
    slope = response_factor() * tau * SensorConfig(S1=s1, T2=1.0).S1
    db, eta = sensitivity(dphi, slope, 2 * tau)
    db2, eta2 = sensitivity(dphi, 2 * slope, 8 * tau)
    assert db2 == pytest.approx(db / 2)
    assert eta2 == pytest.approx(eta)


def test_low_frequency_scenario():
    out = low_frequency_scenario()
    assert out["tau_s"] == pytest.approx(1 / 0.132)
    assert out["sensor"].working_point_tag == "offset-6G"
    assert out["eta_T_per_rtHz"] / units.NANOTESLA == pytest.approx(108, rel=0.01)


def test_sensor_validation():
    with pytest.raises(DomainError):
        SensorConfig(S1=1.0, T2=0.0)
    with pytest.raises(DomainError):
        SensorConfig(S1=1.0, T2=1.0, working_point_tag="elsewhere")
    with pytest.raises(DomainError):
        echo_phase(SensorConfig(S1=1.0, T2=1.0), 0.0, 1.0)
    with pytest.raises(DomainError):
        simulate_sweep(reference_sensor(), 0.5, [0, 1e-6], sigma=-1)


def test_sweep_is_seeded():
    b = np.linspace(0, 2, 11) * UT
    a = simulate_sweep(reference_sensor(), REFERENCE_TAU, b, sigma=0.03, seed=5)
    c = simulate_sweep(reference_sensor(), REFERENCE_TAU, b, sigma=0.03, seed=5)
    d = simulate_sweep(reference_sensor(), REFERENCE_TAU, b, sigma=0.03, seed=6)
    assert np.array_equal(a.X, c.X) and not np.array_equal(a.X, d.X)


def test_csv_round_trip(tmp_path):
    run = simulate_sweep(reference_sensor(), REFERENCE_TAU, np.linspace(0, 2, 11) * UT, sigma=0.03, seed=1)
    run.to_csv(tmp_path / "sweep.csv")
    back = SensingRun.from_csv(tmp_path / "sweep.csv", REFERENCE_TAU, repeats=1)
    assert np.array_equal(back.X, run.X) and np.array_equal(back.B_ac, run.B_ac)
    assert fit_response(back).slope == fit_response(run).slope

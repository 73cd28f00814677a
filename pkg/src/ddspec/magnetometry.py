"""Spin-echo ac magnetometry: phase response, quadrature readout, sensitivity.

A field ``B_ac sin(2 pi nu t)`` with ``nu = 1/(2 tau)`` is synchronised with a
two-pulse echo of total length ``2 tau``.  The sign-weighted integral of the
detuning ``S1 B(t)`` over the echo is ``(4/pi) tau S1 B_ac``.  The published
response is usually written ``pi tau S1 B_ac``; both are available through
``convention`` and differ only in the value of ``S1`` one infers from a
measured slope.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import rng, units
from .errors import DomainError, InsensitiveConfigurationError, SamplingDensityError

CONVENTIONS = {"integral": 4.0 / np.pi, "printed": np.pi}
WORKING_POINTS = ("ZEFOZ-near", "offset-200G", "offset-6G", "custom")


def response_factor(convention="integral"):
    """Dimensionless prefactor ``c`` in ``phi = c * tau * S1 * B_ac``."""
    try:
        return CONVENTIONS[convention]
    except KeyError:
        raise DomainError(f"unknown phase convention {convention!r}") from None


@dataclass(frozen=True)
class SensorConfig:
    """Probe transition near a magnetic working point.

    Parameters
    ----------
    S1 : float
        First-order Zeeman coefficient, rad s^-1 T^-1.  Zero at a ZEFOZ point.
    T2 : float
        Coherence time at the working point, s.
    S2 : float
        Second-order coefficient (metadata only).
    omega0 : float
        Transition angular frequency at the bias field (metadata only).
    """

    S1: float
    T2: float
    S2: float = 0.0
    omega0: float = 0.0
    working_point_tag: str = "custom"
    note: str = ""

    def __post_init__(self):
        if not np.isfinite(self.S1):
            raise DomainError("S1 must be finite")
        if not self.T2 > 0:
            raise DomainError("T2 must be positive")
        if self.working_point_tag not in WORKING_POINTS:
            raise DomainError(f"unknown working point {self.working_point_tag!r}")

    @property
    def S1_hz_per_T(self):
        return self.S1 / units.TWO_PI

    @classmethod
    def from_slope(cls, slope, tau, T2, convention="integral", **kw):
        """Back-solve ``S1`` from a measured phase response (rad/T) at half-time ``tau``."""
        s1 = slope / (response_factor(convention) * tau)
        kw.setdefault("note", f"S1 back-solved from slope {slope:.6g} rad/T ({convention} convention)")
        return cls(S1=s1, T2=T2, **kw)

    def to_dict(self):
        return {"S1_rad_per_s_T": self.S1, "T2_s": self.T2, "S2_rad_per_s_T2": self.S2,
                "omega0_rad_per_s": self.omega0, "working_point": self.working_point_tag,
                "note": self.note}


def _check_tau(tau):
    if not tau > 0:
        raise DomainError("tau must be positive")


def echo_phase(sensor, tau, B_ac, convention="integral", phase_offset=0.0):
    """Echo phase for a synchronised ac field of amplitude ``B_ac`` (T)."""
    _check_tau(tau)
    b = np.asarray(B_ac, dtype=float)
    return response_factor(convention) * tau * sensor.S1 * b * np.cos(phase_offset)


def echo_phase_quadrature(sensor, tau, B_ac, phase_offset=0.0):
    """Sign-weighted numerical integral of ``S1 B(t)`` over the echo.

    This is the reference for the ``"integral"`` convention of
    :func:`echo_phase`.  The ``phase_offset`` shifts the field as
    ``sin(2 pi nu t + offset)``.
    """
    _check_tau(tau)
    w = np.pi / tau

    def lobe(a, b):
        val, _ = integrate.quad(lambda t: np.sin(w * t + phase_offset), a, b,
                                epsabs=0.0, epsrel=1e-13, limit=200)
        return val

    unit = lobe(0.0, tau) - lobe(tau, 2.0 * tau)
    return sensor.S1 * np.asarray(B_ac, dtype=float) * unit


@dataclass(frozen=True, eq=False)
class SensingRun:
    """A field sweep read out in both quadratures.

    ``X``, ``Y`` are the ratios X/R and Y/R averaged over ``repeats`` shots;
    ``R`` is the decoherence envelope ``exp(-2 tau / T2)`` (metadata).
    """

    tau: float
    B_ac: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    repeats: int = 1
    sigma: float = 0.0
    R: float = 1.0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def nu_op(self):
        return 1.0 / (2.0 * self.tau)

    @property
    def T_total(self):
        """Total measurement time per sweep point, s."""
        return self.repeats * 2.0 * self.tau

    @property
    def phi(self):
        return np.arctan2(self.X, self.Y)

    def __len__(self):
        return len(self.B_ac)

    def to_csv(self, path):
        from .io import write_csv

        write_csv(path, {"B_ac_T": self.B_ac, "X_over_R": self.X, "Y_over_R": self.Y,
                         "phi_rad": self.phi})

    @classmethod
    def from_csv(cls, path, tau, repeats=1):
        from .io import read_csv

        c = read_csv(path, required=("B_ac_T", "X_over_R", "Y_over_R"))
        return cls(tau, c["B_ac_T"], c["X_over_R"], c["Y_over_R"], repeats)


def simulate_sweep(sensor, tau, B_ac, sigma=0.0, seed=0, repeats=1, convention="integral",
                   phase_offset=0.0):
    """Simulated quadrature readout over a field sweep.

    Each shot gives ``X/R = sin(phi) + e_x`` and ``Y/R = cos(phi) + e_y`` with
    independent Gaussian ``e`` of standard deviation ``sigma``; a point is the
    mean of ``repeats`` shots.
    """
    _check_tau(tau)
    if sigma < 0:
        raise DomainError("sigma must be non-negative")
    if int(repeats) != repeats or repeats < 1:
        raise DomainError("repeats must be a positive integer")
    b = np.atleast_1d(np.asarray(B_ac, dtype=float))
    phi = echo_phase(sensor, tau, b, convention, phase_offset)
    x, y = np.sin(phi), np.cos(phi)
    if sigma > 0:
        g = rng.stream(seed, "magnetometry-sweep")
        noise = g.standard_normal((2, repeats, len(b))) * sigma
        x = x + noise[0].mean(axis=0)
        y = y + noise[1].mean(axis=0)
    envelope = float(np.exp(-2.0 * tau / sensor.T2))
    return SensingRun(tau, b, x, y, int(repeats), float(sigma), envelope, seed,
                      {"convention": convention, "phase_offset_rad": phase_offset,
                       "sensor": sensor.to_dict()})


@dataclass(frozen=True, eq=False)
class ResponseFit:
    slope: float  # rad/T
    sigma_slope: float
    intercept: float
    residuals: np.ndarray
    phi: np.ndarray

    def __iter__(self):
        return iter((self.slope, self.sigma_slope, self.residuals))


UNWRAP_LIMIT = 0.9 * np.pi


def fit_response(run):
    """Ordinary least-squares phase response from a sweep.

    Phases come from ``atan2(X, Y)`` and are unwrapped along the sweep.  An
    adjacent jump within 10 % of pi cannot be assigned a direction and is
    reported as undersampling.
    """
    if len(run) < 5:
        raise SamplingDensityError(f"need at least 5 sweep points, got {len(run)}")
    order = np.argsort(run.B_ac, kind="stable")
    b = run.B_ac[order]
    raw = run.phi[order]
    step = np.angle(np.exp(1j * np.diff(raw)))
    if np.any(np.abs(step) > UNWRAP_LIMIT):
        k = int(np.argmax(np.abs(step)))
        raise SamplingDensityError(
            f"phase jump of {step[k]:.3f} rad between B={b[k]:.4g} T and {b[k + 1]:.4g} T is ambiguous"
        )
    phi = np.unwrap(raw)
    if np.ptp(b) == 0:
        raise SamplingDensityError("sweep has no spread in B_ac")
    a = np.vstack([b, np.ones_like(b)]).T
    coef, *_ = np.linalg.lstsq(a, phi, rcond=None)
    resid = phi - a @ coef
    dof = len(b) - 2
    s2 = float(resid @ resid) / dof
    sxx = float(np.sum((b - b.mean()) ** 2))
    return ResponseFit(float(coef[0]), float(np.sqrt(s2 / sxx)), float(coef[1]), resid, phi)


def sensitivity(delta_phi, slope, T_total):
    """Minimum detectable field ``delta_phi / slope`` (T) and ``eta = dB_min sqrt(T_total)`` (T/sqrt(Hz))."""
    if slope == 0:
        raise InsensitiveConfigurationError("zero phase response: sensor is field-insensitive")
    if slope < 0:
        raise DomainError("slope must be positive")
    if delta_phi < 0:
        raise DomainError("delta_phi must be non-negative")
    if not T_total > 0:
        raise DomainError("T_total must be positive")
    db = delta_phi / slope
    return db, db * np.sqrt(T_total)


# reference operating point: 200 G offset, 0.75 Hz field
REFERENCE_TAU = 0.666  # s
REFERENCE_SLOPE = 3.376 / units.MICROTESLA  # rad/T
REFERENCE_DELTA_PHI = 0.016  # rad
REFERENCE_REPEATS = 4
REFERENCE_T2 = 1.44  # s


def reference_sensor(convention="integral"):
    """Sensor at the 200 G offset point, with S1 back-solved from the reference slope."""
    return SensorConfig.from_slope(REFERENCE_SLOPE, REFERENCE_TAU, REFERENCE_T2, convention,
                                   working_point_tag="offset-200G")


def low_frequency_scenario(nu_op=0.066, offset_G=6.0, reference_offset_G=200.0, repeats=4,
                           delta_phi=REFERENCE_DELTA_PHI):
    """Sensitivity estimate for a slow ac field measured closer to the ZEFOZ point.

    Assumes ``S1`` grows linearly with the bias offset from the ZEFOZ point
    (first-order Zeeman coefficient of a curved transition), the per-point
    phase error stays at the reference value, and each point averages
    ``repeats`` echoes of length ``2 tau``.
    """
    tau = 1.0 / (2.0 * nu_op)
    ref = reference_sensor()
    s1 = ref.S1 * offset_G / reference_offset_G
    sensor = SensorConfig(S1=s1, T2=ref.T2, working_point_tag="offset-6G" if offset_G == 6.0 else "custom",
                          note="S1 scaled linearly with offset from the reference point")
    slope = response_factor() * tau * s1
    t_total = repeats * 2.0 * tau
    db, eta = sensitivity(delta_phi, slope, t_total)
    return {"sensor": sensor, "tau_s": tau, "nu_op_Hz": nu_op, "slope_rad_per_T": slope,
            "T_total_s": t_total, "delta_B_min_T": db, "eta_T_per_rtHz": eta}

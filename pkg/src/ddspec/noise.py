"""Parametric bath spectra and Gaussian-Markovian noise trajectories."""

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from . import rng, units
from .errors import DomainError, ResolutionError, UnsupportedModelError

KINDS = ("single-lorentzian", "double-lorentzian", "power-law")


@dataclass(frozen=True)
class SpectralModel:
    """One-sided spectral density of the bath-induced detuning noise.

    Lorentzian kinds are parametrised by a coupling ``b`` in Hz and
    correlation times in seconds.  A single Lorentzian keeps its correlation
    time in ``tau_c_slow``.  ``b_fast`` switches the double Lorentzian to the
    two-amplitude variant; by default both components share ``b``.
    Power-law models (``amplitude * nu**-alpha`` in display units) exist for
    fitting only and cannot be sampled.
    """

    kind: str
    b: float = 0.0
    tau_c_slow: float = 1.0
    tau_c_fast: float | None = None
    b_fast: float | None = None
    alpha: float | None = None
    amplitude: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown spectral model kind {self.kind!r}")
        if self.kind == "power-law":
            if self.alpha is None or self.amplitude is None:
                raise DomainError("power-law model needs alpha and amplitude")
            if not np.isfinite(self.alpha) or not self.amplitude >= 0:
                raise DomainError("power-law amplitude must be >= 0, alpha finite")
            return
        if not (self.b >= 0 and np.isfinite(self.b)):
            raise DomainError(f"coupling b must be >= 0, got {self.b}")
        if not (self.tau_c_slow > 0 and np.isfinite(self.tau_c_slow)):
            raise DomainError(f"tau_c must be > 0, got {self.tau_c_slow}")
        if self.kind == "double-lorentzian":
            if self.tau_c_fast is None or not self.tau_c_fast > 0:
                raise DomainError("double-lorentzian needs tau_c_fast > 0")
            if self.tau_c_slow < self.tau_c_fast:
                raise DomainError(
                    f"tau_c_slow ({self.tau_c_slow}) must be >= tau_c_fast ({self.tau_c_fast})"
                )
            if self.b_fast is not None and not self.b_fast >= 0:
                raise DomainError("b_fast must be >= 0")

    @classmethod
    def single_lorentzian(cls, b, tau_c):
        return cls("single-lorentzian", b=float(b), tau_c_slow=float(tau_c))

    @classmethod
    def double_lorentzian(cls, b, tau_c_slow, tau_c_fast, b_fast=None):
        return cls(
            "double-lorentzian",
            b=float(b),
            tau_c_slow=float(tau_c_slow),
            tau_c_fast=float(tau_c_fast),
            b_fast=None if b_fast is None else float(b_fast),
        )

    @classmethod
    def power_law(cls, amplitude, alpha):
        return cls("power-law", amplitude=float(amplitude), alpha=float(alpha))

    @property
    def tau_c(self):
        return self.tau_c_slow

    @property
    def is_lorentzian(self):
        return self.kind != "power-law"

    @property
    def shortest_tau_c(self):
        if self.kind == "double-lorentzian":
            return self.tau_c_fast
        return self.tau_c_slow

    def lorentzians(self):
        """List of ``(b_Hz, tau_c_s)`` components."""
        if self.kind == "single-lorentzian":
            return [(self.b, self.tau_c_slow)]
        if self.kind == "double-lorentzian":
            bf = self.b if self.b_fast is None else self.b_fast
            return [(self.b, self.tau_c_slow), (bf, self.tau_c_fast)]
        raise UnsupportedModelError(
            "power-law spectra have no stationary Markovian realisation"
        )

    def components(self):
        """List of ``(sigma_rad_per_s, tau_c_s)`` for the angular detuning process."""
        return [(units.TWO_PI * b, tau) for b, tau in self.lorentzians()]

    @property
    def tag(self):
        if self.kind == "single-lorentzian":
            return f"single-lorentzian(b={self.b:g}Hz,tau_c={self.tau_c_slow:g}s)"
        if self.kind == "double-lorentzian":
            extra = "" if self.b_fast is None else f",b_fast={self.b_fast:g}Hz"
            return (
                f"double-lorentzian(b={self.b:g}Hz{extra},"
                f"tau_c_slow={self.tau_c_slow:g}s,tau_c_fast={self.tau_c_fast:g}s)"
            )
        return f"power-law(A={self.amplitude:g},alpha={self.alpha:g})"

    def to_dict(self):
        if self.kind == "single-lorentzian":
            return {"kind": self.kind, "b_Hz": self.b, "tau_c_s": self.tau_c_slow}
        if self.kind == "double-lorentzian":
            d = {
                "kind": self.kind,
                "b_Hz": self.b,
                "tau_c_slow_s": self.tau_c_slow,
                "tau_c_fast_s": self.tau_c_fast,
            }
            if self.b_fast is not None:
                d["b_fast_Hz"] = self.b_fast
            return d
        return {"kind": self.kind, "amplitude_disp": self.amplitude, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d):
        kind = d["kind"]
        if kind == "single-lorentzian":
            return cls.single_lorentzian(d["b_Hz"], d["tau_c_s"])
        if kind == "double-lorentzian":
            return cls.double_lorentzian(
                d["b_Hz"], d["tau_c_slow_s"], d["tau_c_fast_s"], d.get("b_fast_Hz")
            )
        if kind == "power-law":
            return cls.power_law(d["amplitude_disp"], d["alpha"])
        raise DomainError(f"unknown spectral model kind {kind!r}")


def evaluate_psd(model, nu):
    """Display spectral density S(nu) at cycle frequency ``nu`` (Hz).

    For Lorentzian kinds this is ``sum (1/pi) 2 b^2 tau_c / (1 + (2 pi nu tau_c)^2)``,
    so ``S(0) = (2/pi) b^2 sum(tau_c)`` and each component integrates to
    ``b^2`` over angular frequency.
    """
    nu = np.asarray(nu, dtype=float)
    if np.any(~np.isfinite(nu)) or np.any(nu < 0):
        raise DomainError("frequency must be finite and >= 0")
    if model.kind == "power-law":
        if np.any(nu == 0):
            raise DomainError("power-law density diverges at nu = 0")
        out = model.amplitude * nu ** (-model.alpha)
    else:
        out = np.zeros_like(nu)
        for b, tau in model.lorentzians():
            out = out + (2.0 * b * b * tau / np.pi) / (1.0 + (units.TWO_PI * nu * tau) ** 2)
    return out if out.ndim else float(out)


def omega_psd(model, omega):
    """Two-sided angular density ``S_omega`` of the detuning process (rad^2/s)."""
    omega = np.asarray(omega, dtype=float)
    if model.kind == "power-law":
        with np.errstate(divide="ignore"):
            out = units.DISPLAY_FACTOR * model.amplitude * (omega / units.TWO_PI) ** (-model.alpha)
    else:
        out = np.zeros_like(omega)
        for sigma, tau in model.components():
            out = out + 2.0 * sigma * sigma * tau / (1.0 + (omega * tau) ** 2)
    return out if out.ndim else float(out)


def autocorrelation(model, lag, angular=False):
    """Stationary autocorrelation ``sum b^2 exp(-lag/tau_c)``.

    Returned in Hz^2 by default; ``angular=True`` gives the detuning
    process in rad^2/s^2, i.e. ``(2 pi)^2`` times larger.
    """
    lag = np.asarray(lag, dtype=float)
    if np.any(lag < 0):
        raise DomainError("lag must be >= 0")
    comps = model.components() if angular else model.lorentzians()
    out = np.zeros_like(lag)
    for amp, tau in comps:
        out = out + amp * amp * np.exp(-lag / tau)
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class NoiseTrajectory:
    dt: float
    samples: np.ndarray
    seed: int
    model_tag: str
    components: tuple = field(default=(), repr=False)

    @property
    def duration(self):
        return self.dt * len(self.samples)

    @property
    def times(self):
        return self.dt * np.arange(len(self.samples))

    def to_csv(self, path):
        from .io import write_csv

        write_csv(path, {"t_s": self.times, "xi_rad_per_s": self.samples})


def ou_recursion(x0, decay, kick, gaussians):
    """Exact OU update ``x[k+1] = decay*x[k] + kick*g[k]`` starting from ``x0``."""
    n = len(gaussians) + 1
    out = np.empty(n)
    out[0] = x0
    if n > 1:
        out[1:] = lfilter([kick], [1.0, -decay], gaussians, zi=[decay * x0])[0]
    return out


def sample_trajectory(model, dt, duration, seed, index=0, keep_components=False):
    """Draw one realisation of the detuning process ``xi(t)`` (rad/s).

    Each Lorentzian component is an independent Ornstein-Uhlenbeck process
    started from its stationary distribution and advanced with the exact
    one-step update.  The stream for component ``k`` is keyed by
    ``(seed, index, k)`` so the result is a pure function of the arguments.
    """
    if model.kind == "power-law":
        raise UnsupportedModelError("power-law models are fit-only and cannot be sampled")
    if not dt > 0:
        raise DomainError("dt must be > 0")
    if not duration >= dt:
        raise DomainError("duration must be >= dt")
    if dt > model.shortest_tau_c / 10.0 * (1 + 1e-12):
        raise ResolutionError(
            f"dt={dt:g}s does not resolve tau_c={model.shortest_tau_c:g}s (need dt <= tau_c/10)"
        )
    n = int(round(duration / dt))
    total = np.zeros(n)
    parts = []
    for k, (sigma, tau) in enumerate(model.components()):
        gen = rng.stream(seed, "noise-trajectory", index, k)
        g = gen.standard_normal(n)
        decay = np.exp(-dt / tau)
        kick = sigma * np.sqrt(-np.expm1(-2.0 * dt / tau))
        x = ou_recursion(sigma * g[0], decay, kick, g[1:])
        total += x
        if keep_components:
            parts.append(x)
    return NoiseTrajectory(dt, total, int(seed), model.tag, tuple(parts))

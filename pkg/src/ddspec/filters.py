"""Pulse sequences, CPMG filter functions and the analytic decoherence exponent.

The decoherence exponent of an n-pulse CPMG sequence of total length t is

    chi(t) = (1/pi) * integral_0^inf S_omega(w) F(n, w t) / w^2 dw,

with ``S_omega`` the two-sided angular density of the detuning process
(see :mod:`ddspec.units`) and ``F = (w^2/2) |y(w)|^2`` the Fourier weight of
the +/-1 temporal filter ``y``.  For pulses at ``(k - 1/2) tau``,

    F(n, x) = 8 sin^4(x/4n) sin^2(x/2) / cos^2(x/2n)    (n even)
    F(n, x) = 8 sin^4(x/4n) cos^2(x/2) / cos^2(x/2n)    (n odd)
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .errors import DomainError, IntegrationError
from .noise import SpectralModel, omega_psd

SEQUENCE_KINDS = ("hahn", "cpmg")


@dataclass(frozen=True)
class PulseSequence:
    """Ideal pi-pulse train with spacing ``tau``; pulses sit at ``(k - 1/2) tau``."""

    kind: str
    n: int
    tau: float

    def __post_init__(self):
        if self.kind not in SEQUENCE_KINDS:
            raise DomainError(f"unknown sequence kind {self.kind!r}")
        if self.kind == "hahn" and self.n != 1:
            raise DomainError("a Hahn echo has exactly one pulse")
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"pulse count must be a positive integer, got {self.n}")
        if not (self.tau > 0 and np.isfinite(self.tau)):
            raise DomainError(f"pulse spacing must be > 0, got {self.tau}")

    @classmethod
    def hahn(cls, tau):
        return cls("hahn", 1, float(tau))

    @classmethod
    def cpmg(cls, n, tau):
        return cls("cpmg", int(n), float(tau))

    @property
    def pulse_times(self):
        return (np.arange(1, self.n + 1) - 0.5) * self.tau

    @property
    def total_time(self):
        return self.n * self.tau

    def with_n(self, n):
        kind = "hahn" if (self.kind == "hahn" and n == 1) else "cpmg"
        return PulseSequence(kind, int(n), self.tau)

    def to_dict(self):
        return {"kind": self.kind, "n": self.n, "tau_s": self.tau}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("kind", "cpmg"), int(d.get("n", 1)), float(d["tau_s"]))


def _dirichlet_ratio(x, n, inner):
    """``inner(x)^2 / cos^2(x/2n)`` with the removable poles handled exactly.

    Near a pole ``x0 = n pi (2k+1)`` the ratio equals
    ``sin^2(m d) / sin^2(d / 2n)`` with ``d = x - x0`` (``m = 1/2`` for the
    half-angle numerators, ``m = 1`` for the printed ``sin^2 x``).
    """
    x = np.asarray(x, dtype=float)
    c = np.cos(x / (2 * n))
    out = np.empty_like(x)
    far = np.abs(c) >= 0.25
    out[far] = inner(x[far]) ** 2 / c[far] ** 2
    near = ~far
    if np.any(near):
        xn = x[near]
        k = np.round((xn / (n * np.pi) - 1.0) / 2.0)
        d = xn - n * np.pi * (2.0 * k + 1.0)
        m = 1.0 if inner is np.sin else 0.5
        limit = (2.0 * m * n) ** 2
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.sin(m * d) ** 2 / np.sin(d / (2 * n)) ** 2
        out[near] = np.where(d == 0.0, limit, r)
    return out


def filter_value(n, x):
    """CPMG filter weight ``F(n, x)`` at dimensionless ``x = omega * t``.

    Total on ``x >= 0``; the removable singularities at ``cos(x/2n) = 0``
    are evaluated through their exact local form.  Vectorised over ``x``.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if np.any(x < 0):
        raise DomainError("filter argument must be >= 0")
    if n % 2 == 0:
        ratio = _dirichlet_ratio(x, n, lambda y: np.sin(y / 2))
    else:
        ratio = _dirichlet_ratio(x, n, lambda y: np.cos(y / 2))
    out = 8.0 * np.sin(x / (4 * n)) ** 4 * ratio
    return float(out[0]) if scalar else out


def printed_filter_value(n, x):
    """Literal ``8 sin^2(x) sin^4(x/4n) / cos^2(x/2n)``.

    Kept for comparison only.  It is not the Fourier weight of the CPMG
    sign pattern (for n = 1 it gives ``32 sin^2(x/2) sin^4(x/4)`` instead
    of ``8 sin^4(x/4)``), so nothing downstream uses it.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if np.any(x < 0):
        raise DomainError("filter argument must be >= 0")
    out = 8.0 * np.sin(x / (4 * n)) ** 4 * _dirichlet_ratio(x, n, np.sin)
    return float(out[0]) if scalar else out


def filter_mean(n):
    """Average of ``F(n, x)`` over its period ``4 n pi``."""
    return 2.0 * n + 1.0


_GL16 = np.polynomial.legendre.leggauss(16)
_GL8 = np.polynomial.legendre.leggauss(8)


def _segment_edges(n, first, count):
    """Edges of consecutive zero-to-zero segments of F (width 2 pi)."""
    idx = np.arange(first, first + count + 1, dtype=float)
    if n % 2 == 0:
        edges = 2.0 * np.pi * idx
    else:
        edges = np.where(idx == 0, 0.0, (2.0 * idx - 1.0) * np.pi)
    return edges[:-1], edges[1:]


def _gl(fun, a, b, rule):
    nodes, weights = rule
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    z = mid[:, None] + half[:, None] * nodes[None, :]
    return (fun(z) * weights[None, :]).sum(axis=1) * half


def _gl_refined(fun, a, b, rel_tol, max_depth=40):
    """Per-segment GL16 integrals, bisecting segments where GL16 and GL8 disagree.

    Returns ``(value, error)`` summed over all segments.
    """
    value, error = 0.0, 0.0
    for depth in range(max_depth + 1):
        i16 = _gl(fun, a, b, _GL16)
        i8 = _gl(fun, a, b, _GL8)
        diff = np.abs(i16 - i8)
        scale = max(abs(value) + float(np.abs(i16).sum()), 1e-300)
        bad = (diff > rel_tol * np.abs(i16)) & (diff > 1e-3 * rel_tol * scale)
        if depth == max_depth:
            bad[:] = False
        value += float(i16[~bad].sum())
        error += float(diff[~bad].sum())
        if not np.any(bad):
            break
        lo, hi = a[bad], b[bad]
        mid = 0.5 * (lo + hi)
        a = np.concatenate([lo, mid])
        b = np.concatenate([mid, hi])
    return value, error


def _spectrum_callable(spectrum):
    if isinstance(spectrum, SpectralModel):
        return lambda w: omega_psd(spectrum, w)
    if callable(spectrum):
        return spectrum
    raise TypeError("spectrum must be a SpectralModel or a callable S_omega(omega)")


def _is_silent(spectrum):
    return (
        isinstance(spectrum, SpectralModel)
        and spectrum.is_lorentzian
        and all(b == 0 for b, _ in spectrum.lorentzians())
    )


def chi_with_error(spectrum, seq, rel_tol=1e-10, max_segments=4_000_000):
    """Decoherence exponent and an error estimate for one pulse sequence.

    ``spectrum`` is a :class:`SpectralModel` or any callable returning the
    two-sided angular density ``S_omega(omega)``.  The integral runs over
    zero-to-zero segments of the filter with Gauss-Legendre rules (16 vs 8
    nodes give the local error); once the remaining contribution is below
    ``rel_tol`` the tail is replaced by the filter's period average times
    the smooth remainder, whose oscillatory error is added to the estimate.
    """
    if _is_silent(spectrum):
        return 0.0, 0.0
    s_omega = _spectrum_callable(spectrum)
    n, t = seq.n, seq.total_time

    def weight(z):
        return (t / np.pi) * s_omega(z / t) / (z * z)

    def integrand(z):
        return weight(z) * filter_value(n, z.ravel()).reshape(z.shape)

    def smooth_tail(z0):
        # (1/pi) int_{z0/t}^inf S(w)/w^2 dw, with u = 1/w
        val, _ = integrate.quad(
            lambda u: s_omega(1.0 / u) if u > 0 else 0.0,
            0.0, t / z0, limit=200, epsabs=0.0, epsrel=1e-12,
        )
        return val / np.pi

    fbar = filter_mean(n)
    period = 4.0 * n * np.pi
    z_min = 2.0 * (n + 2) * np.pi
    total, err, first, block = 0.0, 0.0, 0, 256
    while True:
        a, b = _segment_edges(n, first, block)
        val, e = _gl_refined(integrand, a, b, rel_tol)
        total += val
        err += e
        first += block
        z_end = float(b[-1])
        tail = fbar * smooth_tail(z_end)
        # replacing F by its mean beyond z_end errs by at most fbar * period * w(z_end)
        # (weight monotone, F - fbar has zero mean per period)
        remainder = fbar * period * abs(float(weight(np.array([z_end]))[0]))
        if z_end >= z_min and remainder <= rel_tol * max(total + tail, 1e-300):
            break
        if first >= max_segments:
            break
        block = min(2 * block, 65536)
    err += remainder
    value = total + tail
    if not np.isfinite(value):
        raise IntegrationError("decoherence integral did not converge", value, err)
    if err > max(1e-6 * abs(value), 1e-12):
        raise IntegrationError(
            f"decoherence integral error {err:.3g} exceeds tolerance for chi={value:.6g}",
            value, err,
        )
    return max(value, 0.0), err


def chi(spectrum, seq, rel_tol=1e-10):
    """Decoherence exponent ``chi`` at total time ``n * tau`` (dimensionless)."""
    return chi_with_error(spectrum, seq, rel_tol=rel_tol)[0]


def coherence_analytic(spectrum, seq, rel_tol=1e-10):
    """Gaussian coherence ``C = exp(-chi)``."""
    return float(np.exp(-chi(spectrum, seq, rel_tol=rel_tol)))


@lru_cache(maxsize=64)
def _kernel_table(n, n_segments):
    a, b = _segment_edges(n, 0, n_segments)
    per = _gl(lambda z: filter_value(n, z.ravel()).reshape(z.shape) / (z * z), a, b, _GL16)
    cum = np.concatenate([[0.0], np.cumsum(per)]) / np.pi
    return np.concatenate([[a[0]], b]), cum


def kernel_integral(n, z, n_segments=None):
    """Cumulative kernel ``G(z) = (1/pi) int_0^z F(n, x)/x^2 dx``.

    ``z`` may contain ``np.inf``.  Beyond the tabulated range the filter
    is replaced by its period mean.
    """
    if n_segments is None:
        n_segments = max(20000, 400 * n)
    edges, cum = _kernel_table(n, n_segments)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    out = np.empty_like(z)
    zmax = edges[-1]
    g_inf = cum[-1] + filter_mean(n) / (np.pi * zmax)
    beyond = z >= zmax
    out[beyond] = g_inf - filter_mean(n) / (np.pi * z[beyond])
    inside = ~beyond
    if np.any(inside):
        zi = z[inside]
        idx = np.clip(np.searchsorted(edges, zi, side="right") - 1, 0, len(edges) - 2)
        lo = edges[idx]
        part = np.zeros_like(zi)
        mask = zi > lo
        if np.any(mask):
            part[mask] = _gl(
                lambda x: filter_value(n, x.ravel()).reshape(x.shape) / (x * x),
                lo[mask], zi[mask], _GL16,
            ) / np.pi
        out[inside] = cum[idx] + part
    return out


@lru_cache(maxsize=64)
def passband_weight(n):
    """Per-unit-time kernel weight of the fundamental passband, ``kappa(n)``.

    The passband is ``0 < omega t <= 2 n pi``: everything closer to the
    fundamental ``omega = pi/tau`` than to its third harmonic.
    """
    return float(kernel_integral(n, [2.0 * n * np.pi])[0])

"""Spectrum reconstruction from decay rates and parametric spectral fits."""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import units
from .coherence import extract_t2
from .errors import (
    ApproximationError,
    DomainError,
    FitError,
    RangeError,
    RankDeficiencyWarning,
)
from .filters import PulseSequence, chi_with_error, kernel_integral, passband_weight
from .noise import SpectralModel, evaluate_psd

HARMONIC_SYSTEMATIC = 0.05
MIN_TIGHT_N = 8


@dataclass(frozen=True)
class RatePoint:
    tau: float
    gamma: float
    sigma_gamma: float
    ok: bool = True
    note: str = ""


def decay_rates(source, n, tau_grid, free_amplitude=False):
    """Decay rate ``Gamma = 1/T2`` for each pulse spacing.

    ``source`` is either a :class:`SpectralModel` (forward model: ``Gamma =
    chi(n, tau) / (n tau)``) or a sequence of :class:`CoherenceCurve` aligned
    with ``tau_grid`` (one T2 fit per curve).  Points whose fit fails come
    back with ``ok=False`` and the reason in ``note``.
    """
    taus = np.asarray(tau_grid, dtype=float)
    if np.any(taus <= 0) or np.any(np.diff(taus) <= 0):
        raise DomainError("tau_grid must be positive and strictly increasing")
    out = []
    if isinstance(source, SpectralModel):
        for tau in taus:
            seq = PulseSequence.cpmg(n, tau)
            value, err = chi_with_error(source, seq)
            t = seq.total_time
            out.append(RatePoint(float(tau), value / t, err / t))
        return out
    curves = list(source)
    if len(curves) != len(taus):
        raise DomainError("need exactly one coherence curve per tau")
    for tau, curve in zip(taus, curves):
        try:
            fit = extract_t2(curve, free_amplitude=free_amplitude)
        except FitError as exc:
            out.append(RatePoint(float(tau), np.nan, np.nan, False, str(exc)))
            continue
        out.append(RatePoint(float(tau), 1.0 / fit.T2, fit.sigma_T2 / fit.T2**2))
    return out


@dataclass(frozen=True, eq=False)
class SpectrumEstimate:
    nu: np.ndarray  # Hz
    S: np.ndarray  # display units
    sigma_S: np.ndarray
    band: tuple = (np.nan, np.nan)
    method_tag: str = "delta"
    report: tuple = ()

    def __post_init__(self):
        nu = np.asarray(self.nu, dtype=float)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "S", np.asarray(self.S, dtype=float))
        object.__setattr__(self, "sigma_S", np.asarray(self.sigma_S, dtype=float))
        if len(nu) > 1 and np.any(np.diff(nu) <= 0):
            raise DomainError("spectrum frequencies must be strictly increasing")
        if np.any(self.sigma_S <= 0):
            raise DomainError("sigma_S must be positive")
        if np.isnan(self.band[0]) and len(nu):
            object.__setattr__(self, "band", (float(nu[0]), float(nu[-1])))

    def __len__(self):
        return len(self.nu)

    def to_csv(self, path):
        from .io import write_csv

        write_csv(path, {"nu_Hz": self.nu, "S": self.S, "sigma_S": self.sigma_S})

    @classmethod
    def from_csv(cls, path, method_tag="external-data"):
        from .io import read_csv

        cols = read_csv(path, required=("nu_Hz", "S", "sigma_S"))
        order = np.argsort(cols["nu_Hz"])
        return cls(cols["nu_Hz"][order], cols["S"][order], cols["sigma_S"][order],
                   method_tag=method_tag)


def _floor_sigma(sigma, s):
    floor = max(1e-12 * float(np.max(np.abs(s), initial=0.0)), np.finfo(float).tiny)
    return np.maximum(sigma, floor)


def reconstruct(rates, n, method="delta", widened=False, regularization=1e-2):
    """Spectrum estimate from decay rates measured with n-pulse CPMG.

    ``method="delta"`` treats the filter as a delta function at
    ``nu = 1/(2 tau)``: ``S_omega(pi/tau) = Gamma / kappa(n)``, where
    ``kappa(n)`` is the kernel weight of the fundamental passband.  Power
    leaking through higher harmonics is not removed; it enters ``sigma_S``
    as a 5 % systematic.  ``method="inversion"`` instead solves the full
    linear problem on a log-frequency grid with non-negativity and a
    smoothness penalty.
    """
    pts = [r for r in rates if r.ok and np.isfinite(r.gamma)]
    skipped = tuple(f"tau={r.tau:g}s excluded: {r.note}" for r in rates if not r.ok)
    if len(pts) < 3:
        raise DomainError("need at least 3 valid rate points")
    if n < MIN_TIGHT_N and not widened:
        raise ApproximationError(
            f"n={n} pulses: passband too wide for the delta approximation (need n >= {MIN_TIGHT_N})"
        )
    pts.sort(key=lambda r: -r.tau)
    tau = np.array([r.tau for r in pts])
    gamma = np.array([r.gamma for r in pts])
    sig_g = np.array([r.sigma_gamma for r in pts])
    nu = 1.0 / (2.0 * tau)
    band = (float(nu[0]), float(nu[-1]))
    systematic = HARMONIC_SYSTEMATIC * (max(1.0, MIN_TIGHT_N / n) if widened else 1.0)
    if method == "delta":
        kappa = passband_weight(n)
        s_omega = gamma / kappa
        sig = np.sqrt((sig_g / kappa) ** 2 + (systematic * s_omega) ** 2)
        s = units.omega_psd_to_display(s_omega)
        sig = units.omega_psd_to_display(sig)
        return SpectrumEstimate(nu, s, _floor_sigma(sig, s), band, "delta", skipped)
    if method == "inversion":
        s, sig = _invert(tau, gamma, sig_g, n, regularization)
        s = units.omega_psd_to_display(s)
        sig = units.omega_psd_to_display(np.sqrt(sig**2 + (systematic * s * units.DISPLAY_FACTOR) ** 2))
        return SpectrumEstimate(nu, s, _floor_sigma(sig, s), band, "linear-inversion", skipped)
    raise DomainError(f"unknown reconstruction method {method!r}")


def _invert(tau, gamma, sig_g, n, lam):
    """Regularised inversion of the full filter kernel.

    The unknown is ``log S_omega`` on a log grid that extends a decade above
    the scanned band (where harmonic passbands land) and a factor 3 below
    it.  Curvature of ``log S`` is penalised with weight ``lam`` per point.
    Returns ``S_omega`` and its standard error at ``omega = pi / tau``.
    """
    omega = np.pi / tau
    lo, hi = np.log(omega.min() / 3.0), np.log(omega.max() * 10.0)
    m = int(np.ceil((hi - lo) / np.log(10.0) * 12)) + 1
    logw = np.linspace(lo, hi, m)
    edges = np.exp(np.concatenate([[-np.inf], 0.5 * (logw[1:] + logw[:-1]), [np.inf]]))
    kern = np.empty((len(tau), m))
    for i, ti in enumerate(n * tau):
        kern[i] = np.diff(kernel_integral(n, edges * ti))
    # quadrature errors are tiny; a 1 % floor keeps the penalty meaningful
    scale = np.sqrt(sig_g**2 + (1e-2 * gamma) ** 2) + 1e-300
    lap = np.diff(np.eye(m), 2, axis=0)
    weight = np.sqrt(lam * len(tau))

    guess = np.log(np.maximum(gamma / passband_weight(n), 1e-300))
    u0 = np.interp(logw, np.log(omega)[::-1], guess[::-1])

    def resid(u):
        u = np.minimum(u, 700.0)
        return np.concatenate([(kern @ np.exp(u) - gamma) / scale, weight * (lap @ u)])

    def jac(u):
        return np.vstack([kern * np.exp(u)[None, :] / scale[:, None], weight * lap])

    res = optimize.least_squares(resid, u0, jac=jac, method="trf", x_scale="jac", max_nfev=2000)
    cov = np.linalg.pinv(res.jac.T @ res.jac)
    su = np.sqrt(np.maximum(np.diag(cov), 0.0))
    at = np.log(omega)
    u = np.interp(at, logw, res.x)
    s = np.exp(u)
    return s, s * np.interp(at, logw, su)


PARAM_NAMES = {
    "single-lorentzian": ("b", "tau_c"),
    "double-lorentzian": ("b", "tau_c_slow", "tau_c_fast"),
    "double-lorentzian-2b": ("b", "b_fast", "tau_c_slow", "tau_c_fast"),
    "power-law": ("amplitude", "alpha"),
}


def _unpack(kind, p):
    """Map unconstrained parameters to physical ones (positivity and ordering built in)."""
    if kind == "single-lorentzian":
        return {"b": np.exp(p[0]), "tau_c": np.exp(p[1])}
    if kind == "double-lorentzian":
        tf = np.exp(p[1])
        return {"b": np.exp(p[0]), "tau_c_slow": tf * (1.0 + np.exp(p[2])), "tau_c_fast": tf}
    if kind == "double-lorentzian-2b":
        tf = np.exp(p[2])
        return {"b": np.exp(p[0]), "b_fast": np.exp(p[1]),
                "tau_c_slow": tf * (1.0 + np.exp(p[3])), "tau_c_fast": tf}
    if kind == "power-law":
        return {"amplitude": np.exp(p[0]), "alpha": p[1]}
    raise DomainError(f"unknown model kind {kind!r}")


def _pack(kind, v):
    if kind == "single-lorentzian":
        return np.log([v["b"], v["tau_c"]])
    if kind in ("double-lorentzian", "double-lorentzian-2b"):
        ratio = max(v["tau_c_slow"] / v["tau_c_fast"] - 1.0, 1e-6)
        head = [np.log(v["b"])] + ([np.log(v.get("b_fast", v["b"]))] if kind.endswith("2b") else [])
        return np.array(head + [np.log(v["tau_c_fast"]), np.log(ratio)])
    return np.array([np.log(v["amplitude"]), v["alpha"]])


def _to_model(kind, v):
    if kind == "single-lorentzian":
        return SpectralModel.single_lorentzian(v["b"], v["tau_c"])
    if kind == "double-lorentzian":
        return SpectralModel.double_lorentzian(v["b"], v["tau_c_slow"], v["tau_c_fast"])
    if kind == "double-lorentzian-2b":
        return SpectralModel.double_lorentzian(v["b"], v["tau_c_slow"], v["tau_c_fast"], v["b_fast"])
    return SpectralModel.power_law(v["amplitude"], v["alpha"])


@dataclass(frozen=True, eq=False)
class FitResult:
    kind: str
    params: dict
    errors: dict
    residual_norm: float
    covariance: np.ndarray
    aicc: float
    n_points: int
    converged: bool = True
    status: str = "ok"
    message: str = ""
    residuals: np.ndarray = field(default=None, repr=False)

    @property
    def n_params(self):
        return len(self.params)

    def model(self):
        return _to_model(self.kind, self.params)

    def to_dict(self):
        return {
            "kind": self.kind,
            "status": self.status,
            "converged": self.converged,
            "params": {k: float(v) for k, v in self.params.items()},
            "errors": {k: float(v) for k, v in self.errors.items()},
            "residual_norm": float(self.residual_norm),
            "aicc": float(self.aicc),
            "n_points": self.n_points,
            "message": self.message,
            "covariance": np.asarray(self.covariance).tolist() if self.covariance is not None else None,
            "residuals": np.asarray(self.residuals).tolist() if self.residuals is not None else None,
        }


def aicc(chi2, n_points, k):
    """Small-sample Akaike criterion for a weighted least-squares fit."""
    if n_points - k - 1 <= 0:
        return np.inf
    return chi2 + 2 * k + 2 * k * (k + 1) / (n_points - k - 1)


def _knee_taus(nu, s):
    """Correlation times from the strongest bends of log S versus log nu."""
    if len(nu) < 5 or np.any(s <= 0):
        return None
    x, y = np.log(nu), np.log(s)
    slope = np.gradient(y, x)
    curv = np.gradient(slope, x)
    order = np.argsort(curv)
    knees = []
    for idx in order:
        if curv[idx] >= 0:
            break
        if all(abs(x[idx] - x[k]) > 0.5 for k in knees):
            knees.append(idx)
        if len(knees) == 2:
            break
    if not knees:
        return None
    nus = sorted(nu[k] for k in knees)
    return [1.0 / (units.TWO_PI * f) for f in nus]


def default_init(spectrum, kind):
    nu, s = spectrum.nu, spectrum.S
    pos = s > 0
    s_low = float(s[pos][0]) if pos.any() else 1.0
    taus = _knee_taus(nu[pos], s[pos]) or [1.0 / (units.TWO_PI * np.sqrt(nu[0] * nu[-1]))]
    if kind == "single-lorentzian":
        tc = taus[0]
        return {"b": np.sqrt(np.pi * s_low / (2 * tc)), "tau_c": tc}
    if kind.startswith("double"):
        ts = taus[0]
        tf = taus[-1] if len(taus) > 1 else ts / 10.0
        if tf >= ts:
            tf = ts / 10.0
        b = np.sqrt(np.pi * s_low / (2 * (ts + tf)))
        v = {"b": b, "tau_c_slow": ts, "tau_c_fast": tf}
        if kind.endswith("2b"):
            hi = float(s[pos][-1])
            w = units.TWO_PI * nu[pos][-1]
            v["b_fast"] = np.sqrt(max(np.pi * hi * (1 + (w * tf) ** 2) / (2 * tf), 1e-30))
        return v
    ok = pos & (nu > 0)
    alpha, lna = np.polyfit(-np.log(nu[ok]), np.log(s[ok]), 1) if ok.sum() >= 2 else (1.0, 0.0)
    return {"amplitude": float(np.exp(lna)), "alpha": float(alpha)}


def _starts(spectrum, kind, init):
    base = default_init(spectrum, kind)
    starts = [_pack(kind, init)] if init is not None else []
    starts.append(_pack(kind, base))
    if kind.startswith("double"):
        nu = spectrum.nu
        lo, hi = 1.0 / (units.TWO_PI * nu[-1]), 1.0 / (units.TWO_PI * nu[0])
        for tf, ts in ((lo * 3, hi / 3), (np.sqrt(lo * hi) / 3, hi / 3), (lo * 3, np.sqrt(lo * hi) * 3)):
            if ts > tf:
                v = dict(base, tau_c_slow=ts, tau_c_fast=tf)
                v["b"] = np.sqrt(np.pi * float(spectrum.S[0]) / (2 * (ts + tf))) if spectrum.S[0] > 0 else base["b"]
                starts.append(_pack(kind, v))
    elif kind == "single-lorentzian":
        nu = spectrum.nu
        for f in (nu[0], np.sqrt(nu[0] * nu[-1]), nu[-1]):
            tc = 1.0 / (units.TWO_PI * f)
            starts.append(_pack(kind, {"b": np.sqrt(np.pi * max(spectrum.S[0], 1e-30) / (2 * tc)), "tau_c": tc}))
    return starts


def fit_model(spectrum, kind, init=None, two_amplitude=False, max_nfev=5000):
    """Weighted trust-region least-squares fit of a spectral family.

    Parameters are optimised in log space (positivity) and the double
    Lorentzian uses ``tau_c_slow = tau_c_fast * (1 + exp(q))`` so the
    slow/fast ordering holds by construction.  Several starting points are
    tried (``init`` first) and the lowest cost wins.  Covariances come from
    the Jacobian at the optimum, mapped to physical parameters.
    """
    if kind == "double-lorentzian" and two_amplitude:
        kind = "double-lorentzian-2b"
    names = PARAM_NAMES.get(kind)
    if names is None:
        raise DomainError(f"unknown model kind {kind!r}")
    k = len(names)
    nu, s, sig = spectrum.nu, spectrum.S, spectrum.sigma_S
    if len(nu) < k + 2:
        raise FitError(f"need at least {k + 2} points to fit {kind}")
    if kind == "power-law" and np.any(nu <= 0):
        raise FitError("power-law fits need nu > 0")

    def resid(p):
        v = _unpack(kind, p)
        with np.errstate(over="ignore", invalid="ignore"):
            m = evaluate_psd(_to_model_fast(kind, v), nu)
        r = (m - s) / sig
        return np.where(np.isfinite(r), r, 1e150)

    best = None
    for p0 in _starts(spectrum, kind, init):
        try:
            res = optimize.least_squares(resid, p0, method="trf", x_scale="jac",
                                         xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=max_nfev)
        except (ValueError, FloatingPointError):
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise FitError(f"{kind} fit failed for every starting point")
    values = _unpack(kind, best.x)
    r = resid(best.x)
    jtj = best.jac.T @ best.jac
    status = "ok"
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(jtj)
    if not np.isfinite(cond) or cond > 1e12:
        warnings.warn(f"{kind}: Jacobian rank deficient (cond={cond:.2g})", RankDeficiencyWarning,
                      stacklevel=2)
        cov_p = np.linalg.pinv(jtj, rcond=1e-12)
        cov_p = cov_p + np.eye(k) * np.max(np.abs(np.diag(cov_p)), initial=1.0)
        status = "rank-deficient"
    else:
        cov_p = np.linalg.inv(jtj)
    d = _transform_jacobian(kind, best.x)
    cov = d @ cov_p @ d.T
    errors = {nm: float(np.sqrt(max(cov[i, i], 0.0))) for i, nm in enumerate(names)}
    chi2 = float(r @ r)
    result = FitResult(
        kind, {nm: float(values[nm]) for nm in names}, errors, float(np.sqrt(chi2)), cov,
        float(aicc(chi2, len(nu), k)), len(nu), bool(best.success), status,
        str(best.message), r,
    )
    if not best.success:
        raise FitError(f"{kind} fit did not converge: {best.message}", best=result)
    return result


def _to_model_fast(kind, v):
    # bypasses validation during optimisation; values are positive by construction
    if kind == "single-lorentzian":
        return SpectralModel.__new__(SpectralModel)._fill("single-lorentzian", v["b"], v["tau_c"], None, None)
    if kind == "double-lorentzian":
        return SpectralModel.__new__(SpectralModel)._fill(kind, v["b"], v["tau_c_slow"], v["tau_c_fast"], None)
    if kind == "double-lorentzian-2b":
        return SpectralModel.__new__(SpectralModel)._fill("double-lorentzian", v["b"], v["tau_c_slow"],
                                                          v["tau_c_fast"], v["b_fast"])
    m = SpectralModel.__new__(SpectralModel)
    for name, val in (("kind", "power-law"), ("b", 0.0), ("tau_c_slow", 1.0), ("tau_c_fast", None),
                      ("b_fast", None), ("alpha", v["alpha"]), ("amplitude", v["amplitude"])):
        object.__setattr__(m, name, val)
    return m


def _fill(self, kind, b, ts, tf, bf):
    for name, val in (("kind", kind), ("b", b), ("tau_c_slow", ts), ("tau_c_fast", tf),
                      ("b_fast", bf), ("alpha", None), ("amplitude", None)):
        object.__setattr__(self, name, val)
    return self


SpectralModel._fill = _fill


def _transform_jacobian(kind, p, h=1e-7):
    names = PARAM_NAMES[kind]
    base = _unpack(kind, p)
    d = np.empty((len(names), len(p)))
    for j in range(len(p)):
        step = h * max(1.0, abs(p[j]))
        hi = _unpack(kind, np.where(np.arange(len(p)) == j, p + step, p))
        lo = _unpack(kind, np.where(np.arange(len(p)) == j, p - step, p))
        for i, nm in enumerate(names):
            d[i, j] = (hi[nm] - lo[nm]) / (2 * step)
    del base
    return d


FAMILIES = ("double-lorentzian", "single-lorentzian", "power-law")


def compare_models(spectrum, two_amplitude=False):
    """Fit every family and rank by AICc (best first); failures go last."""
    if len(spectrum) < 2 or spectrum.nu[0] <= 0 or np.log10(spectrum.nu[-1] / spectrum.nu[0]) < 1.0:
        raise RangeError("spectrum must span at least one decade in frequency")
    results = []
    for kind in FAMILIES:
        try:
            results.append(fit_model(spectrum, kind, two_amplitude=two_amplitude))
        except FitError as exc:
            best = exc.best
            results.append(FitResult(
                kind if best is None else best.kind, {} if best is None else best.params,
                {} if best is None else best.errors,
                np.inf if best is None else best.residual_norm, None, np.inf, len(spectrum),
                False, "failed", str(exc),
            ))
    return sorted(results, key=lambda r: (r.status == "failed", r.aicc))


def periodogram_estimate(samples, dt, segments=16, band=None, bins_per_decade=10):
    """Welch estimate of a sampled field's spectrum, log-binned, in display units.

    ``samples`` are in rad/s.  Welch bins are averaged into logarithmic
    frequency bins so that each point carries a usable standard error
    (Welch scatter over the bin, divided by the root of the independent
    estimates it pools).
    """
    from scipy import signal

    x = np.asarray(samples, dtype=float)
    nper = max(16, len(x) // segments)
    f, p = signal.welch(x - x.mean(), fs=1.0 / dt, nperseg=nper, detrend=False)
    s = units.periodogram_to_display(p)
    lo = f[1] if band is None else max(band[0], f[1])
    hi = f[-1] / 2 if band is None else min(band[1], f[-1])
    edges = np.logspace(np.log10(lo), np.log10(hi), int(np.log10(hi / lo) * bins_per_decade) + 1)
    n_seg = max(1, 2 * len(x) // nper - 1)
    nu, mean, err = [], [], []
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (f >= a) & (f < b)
        k = int(sel.sum())
        if k == 0:
            continue
        nu.append(float(np.exp(np.mean(np.log(f[sel])))))
        mean.append(float(s[sel].mean()))
        err.append(float(s[sel].mean() / np.sqrt(k * n_seg / 2.0)))
    return SpectrumEstimate(np.array(nu), np.array(mean), np.array(err), method_tag="welch")

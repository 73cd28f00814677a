"""Monte Carlo coherence from noise trajectories, T2 extraction and scaling fits."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import optimize

from . import rng
from .errors import DegenerateDataError, DomainError, FitError, RangeError, ResolutionError
from .filters import PulseSequence, chi_with_error
from .noise import SpectralModel

BATCH = 2048
_CHUNK_DOUBLES = 1 << 21


def temporal_sign(seq, t_prime):
    """Value (+1/-1) of the temporal filter at time ``t_prime``.

    The filter starts at +1 and flips at every pulse; the pulse instant
    itself already belongs to the flipped interval.
    """
    t = np.asarray(t_prime, dtype=float)
    if np.any(t < 0) or np.any(t > seq.total_time * (1 + 1e-12)):
        raise DomainError(f"time outside [0, {seq.total_time:g}] s")
    flips = np.searchsorted(seq.pulse_times, t, side="right")
    out = np.where(flips % 2 == 0, 1, -1)
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class CoherenceCurve:
    """Decay points ``(t, C, sigma_C)``; ``t`` is the total sequence time."""

    t: np.ndarray
    C: np.ndarray
    sigma_C: np.ndarray
    sequence: dict = field(default_factory=dict)
    provenance: str = "external-data"
    diagnostics: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "C", np.asarray(self.C, dtype=float))
        object.__setattr__(self, "sigma_C", np.asarray(self.sigma_C, dtype=float))
        if not (len(t) == len(self.C) == len(self.sigma_C)):
            raise DomainError("t, C and sigma_C must have equal length")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise DomainError("curve times must be strictly increasing")
        if self.provenance not in ("analytic", "monte-carlo", "external-data"):
            raise DomainError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return len(self.t)

    def to_csv(self, path):
        from .io import write_csv

        write_csv(path, {"t_s": self.t, "C": self.C, "sigma_C": self.sigma_C})

    @classmethod
    def from_csv(cls, path, sequence=None):
        from .io import read_csv

        cols = read_csv(path, required=("t_s", "C", "sigma_C"))
        return cls(cols["t_s"], cols["C"], cols["sigma_C"], sequence or {}, "external-data")


@numba.njit(cache=True, nogil=True)
def _ou_phase_chunk(x, decay, kick, noise, signs, k0, dt, xi_prev, phase):
    ncomp, nb, nk = noise.shape
    half = 0.5 * dt
    for j in range(nb):
        xp = xi_prev[j]
        ph = phase[j]
        for k in range(nk):
            xi = 0.0
            for c in range(ncomp):
                v = decay[c] * x[c, j] + kick[c] * noise[c, j, k]
                x[c, j] = v
                xi += v
            ph += signs[k0 + k] * half * (xp + xi)
            xp = xi
        xi_prev[j] = xp
        phase[j] = ph


def _grid(seq, min_tau_c, dt=None):
    """Time step aligned with the pulse grid: ``tau/2`` is an integer number of steps."""
    dt_max = min(seq.tau, min_tau_c) / 20.0
    if dt is None:
        m = int(np.ceil(0.5 * seq.tau / dt_max * (1 - 1e-12)))
        return 0.5 * seq.tau / m, m
    if dt > dt_max * (1 + 1e-9):
        raise ResolutionError(
            f"dt={dt:g}s too coarse: need dt <= min(tau, tau_c)/20 = {dt_max:g}s"
        )
    m = 0.5 * seq.tau / dt
    if abs(m - round(m)) > 1e-6:
        raise ResolutionError("tau/2 must be an integer multiple of dt")
    return dt, int(round(m))


def _step_signs(seq_max, dt, n_steps):
    mid = (np.arange(n_steps) + 0.5) * dt
    flips = np.searchsorted(seq_max.pulse_times, mid, side="right")
    return np.where(flips % 2 == 0, 1.0, -1.0)


def _model_batch(model, signs, dt, checkpoints, size, seed, batch):
    comps = model.components()
    sigma = np.array([s for s, _ in comps])
    tau_c = np.array([t for _, t in comps])
    decay = np.exp(-dt / tau_c)
    kick = sigma * np.sqrt(-np.expm1(-2.0 * dt / tau_c))
    gen = rng.stream(seed, "mc-coherence", batch)
    x = sigma[:, None] * gen.standard_normal((len(comps), size))
    xi_prev = x.sum(axis=0)
    phase = np.zeros(size)
    phases = []
    chunk = max(1, _CHUNK_DOUBLES // (len(comps) * size))
    k = 0
    for stop in checkpoints:
        while k < stop:
            nk = min(chunk, stop - k)
            noise = gen.standard_normal((len(comps), size, nk))
            _ou_phase_chunk(x, decay, kick, noise, signs, k, dt, xi_prev, phase)
            k += nk
        phases.append(phase.copy())
    return np.array(phases)


def _bath_batch(state, signs, dt, checkpoints, size, seed, batch):
    from .bath import sample_field

    n_steps = checkpoints[-1]
    phases = np.zeros((len(checkpoints), size))
    for j in range(size):
        xi = sample_field(state, n_steps * dt, dt, seed=rng.derive_seed(seed, "mc-bath", batch, j))
        inc = signs * 0.5 * dt * (xi[:-1] + xi[1:])
        cum = np.concatenate([[0.0], np.cumsum(inc)])
        phases[:, j] = cum[checkpoints]
    return phases


def _run_phases(source, seq_max, n_values, n_traj, seed, dt, threads):
    if n_traj < 100:
        raise DomainError("n_traj must be >= 100")
    if isinstance(source, SpectralModel):
        if source.kind == "power-law":
            from .errors import UnsupportedModelError

            raise UnsupportedModelError("power-law models cannot be sampled")
        dt, m = _grid(seq_max, source.shortest_tau_c, dt)
        worker = _model_batch
    else:
        dt, m = _grid(seq_max, source.fastest_correlation_time, dt)
        worker = _bath_batch
    checkpoints = [2 * m * n for n in n_values]
    signs = _step_signs(seq_max, dt, checkpoints[-1])
    sizes = [min(BATCH, n_traj - i) for i in range(0, n_traj, BATCH)]

    def run(b):
        return worker(source, signs, dt, checkpoints, sizes[b], seed, b)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(b) for b in range(len(sizes))]
    return parts, dt


def _reduce(parts, n_traj):
    # batch partial sums combined in fixed batch order
    cos_s = sum(np.cos(p).sum(axis=1) for p in parts)
    cos2 = sum((np.cos(p) ** 2).sum(axis=1) for p in parts)
    sin_s = sum(np.sin(p).sum(axis=1) for p in parts)
    sin2 = sum((np.sin(p) ** 2).sum(axis=1) for p in parts)
    c = cos_s / n_traj
    s = sin_s / n_traj
    var_c = np.maximum(cos2 / n_traj - c * c, 0.0) * n_traj / (n_traj - 1)
    var_s = np.maximum(sin2 / n_traj - s * s, 0.0) * n_traj / (n_traj - 1)
    return c, np.sqrt(var_c / n_traj), s, np.sqrt(var_s / n_traj)


def mc_coherence_curve(source, seq, n_values=None, n_traj=10_000, seed=0, dt=None, threads=1):
    """Monte Carlo coherence for CPMG prefixes of ``seq`` sharing each trajectory.

    ``source`` is a Lorentzian :class:`SpectralModel` or a :class:`~ddspec.bath.BathState`.
    An n-pulse CPMG block is the first ``n tau`` of any longer one, so a single
    trajectory of length ``max(n_values) * tau`` serves every requested ``n``.
    Returns a :class:`CoherenceCurve` at ``t = n tau``; the imaginary part
    ``<sin phi>`` and its error are kept in ``diagnostics``.
    """
    n_values = sorted({int(v) for v in (n_values or [seq.n])})
    seq_max = seq.with_n(n_values[-1])
    parts, dt = _run_phases(source, seq_max, n_values, n_traj, seed, dt, threads)
    c, sc, s, ss = _reduce(parts, n_traj)
    return CoherenceCurve(
        np.array(n_values) * seq.tau,
        c,
        sc,
        {"kind": seq.kind, "tau_s": seq.tau, "n": n_values},
        "monte-carlo",
        {"imag": s, "sigma_imag": ss, "dt": dt, "n_traj": n_traj, "seed": seed},
    )


def mc_coherence(source, seq, n_traj=10_000, seed=0, dt=None, threads=1):
    """``(C, sigma_C)`` with ``C = <cos phi>``, ``phi = int F(t') xi(t') dt'``.

    Phases are accumulated with the trapezoidal rule on a grid that puts
    every pulse on a grid point and resolves both ``tau`` and the fastest
    correlation time (``dt <= min(tau, tau_c)/20``).  Results depend only on
    the inputs and ``seed``; ``threads`` changes speed, not numbers.
    """
    curve = mc_coherence_curve(source, seq, [seq.n], n_traj, seed, dt, threads)
    return float(curve.C[0]), float(curve.sigma_C[0])


def analytic_curve(model, tau, n_values, kind="cpmg", rel_tol=1e-10):
    """Analytic ``exp(-chi)`` at ``t = n tau`` for each pulse count."""
    n_values = sorted({int(v) for v in n_values})
    chis, errs = [], []
    for n in n_values:
        seq = PulseSequence("hahn" if (kind == "hahn" and n == 1) else "cpmg", n, tau)
        v, e = chi_with_error(model, seq, rel_tol=rel_tol)
        chis.append(v)
        errs.append(e)
    chis = np.array(chis)
    c = np.exp(-chis)
    return CoherenceCurve(
        np.array(n_values) * tau, c, c * np.array(errs),
        {"kind": kind, "tau_s": tau, "n": n_values}, "analytic",
        {"chi": chis},
    )


@dataclass(frozen=True)
class T2Fit:
    T2: float
    sigma_T2: float
    amplitude: float = 1.0
    sigma_amplitude: float = 0.0

    def __iter__(self):
        return iter((self.T2, self.sigma_T2))


def extract_t2(curve, free_amplitude=False):
    """Fit ``A exp(-t/T2)`` (``A = 1`` unless ``free_amplitude``) to a decay curve.

    Points are weighted by ``1/sigma_C`` when every sigma is positive;
    otherwise the fit is unweighted and the error comes from the residual
    scatter.  Returns a :class:`T2Fit` that unpacks as ``(T2, sigma_T2)``.
    """
    t, c, s = curve.t, curve.C, curve.sigma_C
    if len(t) < 4:
        raise FitError("need at least 4 points to extract T2")
    if not np.any(c < 0.9):
        raise FitError("curve does not decay below C = 0.9")
    weighted = bool(np.all(s > 0))
    if weighted and np.all(c <= 3 * s):
        raise DegenerateDataError("every point lies within the noise floor")
    sigma = s if weighted else np.ones_like(c)

    decaying = c > 0
    if np.count_nonzero(decaying & (c < 1)) >= 2:
        sel = decaying & (c < 1)
        slope = np.polyfit(t[sel], np.log(c[sel]), 1)[0]
        t2_guess = -1.0 / slope if slope < 0 else t[-1]
    else:
        t2_guess = t[-1]
    t2_guess = float(np.clip(t2_guess, 1e-3 * t[-1], 1e6 * t[-1]))

    def resid(p):
        amp = np.exp(p[1]) if free_amplitude else 1.0
        return (amp * np.exp(-t / np.exp(p[0])) - c) / sigma

    p0 = [np.log(t2_guess), 0.0] if free_amplitude else [np.log(t2_guess)]
    res = optimize.least_squares(resid, p0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if not res.success:
        raise FitError(f"T2 fit failed: {res.message}", best=np.exp(res.x[0]))
    dof = max(len(t) - len(p0), 1)
    jtj = res.jac.T @ res.jac
    try:
        cov = np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(jtj)
    if not weighted:
        cov = cov * (2 * res.cost / dof)
    t2 = float(np.exp(res.x[0]))
    sig_t2 = float(t2 * np.sqrt(max(cov[0, 0], 0.0)))
    if free_amplitude:
        amp = float(np.exp(res.x[1]))
        return T2Fit(t2, sig_t2, amp, float(amp * np.sqrt(max(cov[1, 1], 0.0))))
    return T2Fit(t2, sig_t2)


def scaling_exponent(pairs):
    """Slope ``beta`` of ``log(1/T2)`` against ``log tau`` and its standard error."""
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 3:
        raise RangeError("need at least 3 (tau, T2) pairs")
    tau, t2 = arr[:, 0], arr[:, 1]
    if np.any(tau <= 0) or np.any(t2 <= 0):
        raise DomainError("tau and T2 must be positive")
    if np.log10(tau.max() / tau.min()) < 1.0 - 1e-12:
        raise RangeError("tau values must span at least one decade")
    x, y = np.log(tau), -np.log(t2)
    xm = x - x.mean()
    beta = float((xm * (y - y.mean())).sum() / (xm * xm).sum())
    resid = y - y.mean() - beta * xm
    dof = len(x) - 2
    s2 = float((resid * resid).sum() / dof) if dof > 0 else 0.0
    return beta, float(np.sqrt(s2 / (xm * xm).sum()))

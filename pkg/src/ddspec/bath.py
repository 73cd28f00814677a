"""Kinetic Monte Carlo of a flip-flopping nuclear-spin bath with a frozen core.

Spins sit around a probe at the origin.  Each spin shifts the probe
detuning by ``A_i n_i`` with ``A_i = 2 pi * coupling_scale / r_i^3`` and
``n_i = +/-1``.  Any two spins closer than ``pairing_cutoff`` form a
flip-flop pair; an anti-aligned pair exchanges its occupations at a fixed
rate, slow if either member lies inside the frozen core and fast otherwise.
"""

import warnings
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy import optimize
from scipy.spatial import cKDTree

from . import rng
from .errors import (
    DomainError,
    EstimationError,
    FitError,
    GeometryError,
    IsolatedSpinWarning,
)
from .units import TWO_PI

GEOMETRIES = ("random-uniform-in-sphere", "cubic-lattice")
MIN_PROBE_DISTANCE_NM = 0.1


@dataclass(frozen=True)
class BathConfig:
    n_spins: int = 400
    geometry: str = "random-uniform-in-sphere"
    density: float = 2.0  # spins / nm^3
    coupling_scale: float = 0.5  # Hz nm^3
    frozen_core_radius: float = 1.5  # nm
    rate_slow: float = 0.2  # 1/s
    rate_fast: float = 5.0  # 1/s
    pairing_cutoff: float = 0.8  # nm
    min_distance: float = 1.0  # nm, exclusion sphere around the probe (random geometry)
    seed: int = 0

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise DomainError(f"unknown geometry {self.geometry!r}")
        if int(self.n_spins) != self.n_spins or self.n_spins < 2:
            raise DomainError("n_spins must be an integer >= 2")
        for name in ("density", "coupling_scale", "frozen_core_radius", "rate_slow",
                     "rate_fast", "pairing_cutoff"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be > 0")
        if self.rate_slow > self.rate_fast:
            raise DomainError("rate_slow must not exceed rate_fast")
        if self.min_distance < MIN_PROBE_DISTANCE_NM:
            raise DomainError(f"min_distance must be >= {MIN_PROBE_DISTANCE_NM} nm")

    @property
    def sphere_radius(self):
        return (3.0 * self.n_spins / (4.0 * np.pi * self.density)) ** (1.0 / 3.0)

    def to_dict(self):
        return {
            "n_spins": self.n_spins,
            "geometry": self.geometry,
            "density_per_nm3": self.density,
            "coupling_scale_Hz_nm3": self.coupling_scale,
            "frozen_core_radius_nm": self.frozen_core_radius,
            "rate_slow_per_s": self.rate_slow,
            "rate_fast_per_s": self.rate_fast,
            "pairing_cutoff_nm": self.pairing_cutoff,
            "min_distance_nm": self.min_distance,
        }

    @classmethod
    def from_dict(cls, d, seed=0):
        keys = {
            "n_spins": "n_spins",
            "geometry": "geometry",
            "density_per_nm3": "density",
            "coupling_scale_Hz_nm3": "coupling_scale",
            "frozen_core_radius_nm": "frozen_core_radius",
            "rate_slow_per_s": "rate_slow",
            "rate_fast_per_s": "rate_fast",
            "pairing_cutoff_nm": "pairing_cutoff",
            "min_distance_nm": "min_distance",
        }
        return cls(seed=seed, **{keys[k]: v for k, v in d.items() if k in keys})


@dataclass(frozen=True, eq=False)
class BathState:
    positions: np.ndarray  # (N, 3) nm
    couplings: np.ndarray  # rad/s
    occupations: np.ndarray  # +/-1
    pairs: np.ndarray  # (P, 2) spin indices
    rates: np.ndarray  # (P,) 1/s
    in_core: np.ndarray  # (N,) bool
    config: BathConfig
    time: float = 0.0
    warnings: tuple = ()

    @property
    def n_spins(self):
        return len(self.couplings)

    @property
    def pair_slow(self):
        return self.in_core[self.pairs[:, 0]] | self.in_core[self.pairs[:, 1]]

    @property
    def field(self):
        return float(self.couplings @ self.occupations)

    @property
    def magnetization(self):
        return int(self.occupations.sum())

    @property
    def fastest_correlation_time(self):
        # two-spin telegraph correlation decays as exp(-2 R t)
        if len(self.rates) == 0:
            return np.inf
        return 1.0 / (2.0 * float(self.rates.max()))

    def with_occupations(self, occupations, time=None):
        return replace(
            self,
            occupations=np.asarray(occupations, dtype=np.int8).copy(),
            time=self.time if time is None else time,
        )


def _place_spins(config):
    gen = rng.stream(config.seed, "bath-geometry")
    n = config.n_spins
    if config.geometry == "random-uniform-in-sphere":
        radius = config.sphere_radius
        r_lo = config.min_distance
        if radius <= r_lo:
            raise GeometryError("sphere radius smaller than the exclusion radius")
        r = np.cbrt(r_lo**3 + gen.random(n) * (radius**3 - r_lo**3))
        v = gen.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1)[:, None]
        return v * r[:, None]
    a = config.density ** (-1.0 / 3.0)
    half = int(np.ceil((n ** (1.0 / 3.0)) / 2.0)) + 2
    g = np.arange(-half, half + 1)
    sites = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3) * a
    d = np.linalg.norm(sites, axis=1)
    keep = d > 0  # the probe substitutes the lattice site at the origin
    sites, d = sites[keep], d[keep]
    order = np.lexsort((sites[:, 2], sites[:, 1], sites[:, 0], np.round(d, 9)))
    return sites[order[:n]]


def build_bath(config, positions=None, rate_fn=None):
    """Place spins, assign couplings, occupations and flip-flop pairs.

    ``positions`` (nm, shape ``(N, 3)``) overrides the configured geometry.
    ``rate_fn(i, j, distance_nm, slow)`` may replace the two-rate rule for
    individual pairs.
    """
    pos = _place_spins(config) if positions is None else np.asarray(positions, dtype=float)
    r = np.linalg.norm(pos, axis=1)
    if np.any(r < MIN_PROBE_DISTANCE_NM):
        raise GeometryError(
            f"{int(np.sum(r < MIN_PROBE_DISTANCE_NM))} spin(s) closer than "
            f"{MIN_PROBE_DISTANCE_NM} nm to the probe"
        )
    couplings = TWO_PI * config.coupling_scale / r**3
    occ = np.where(rng.stream(config.seed, "bath-occupations").random(len(r)) < 0.5, 1, -1)
    pairs = np.array(sorted(cKDTree(pos).query_pairs(config.pairing_cutoff)), dtype=np.int64)
    pairs = pairs.reshape(-1, 2)
    in_core = r < config.frozen_core_radius
    slow = in_core[pairs[:, 0]] | in_core[pairs[:, 1]] if len(pairs) else np.zeros(0, bool)
    rates = np.where(slow, config.rate_slow, config.rate_fast).astype(float)
    if rate_fn is not None:
        d = np.linalg.norm(pos[pairs[:, 0]] - pos[pairs[:, 1]], axis=1)
        rates = np.array(
            [rate_fn(int(i), int(j), float(dd), bool(s)) for (i, j), dd, s in zip(pairs, d, slow)],
            dtype=float,
        )
    notes = []
    paired = np.zeros(len(r), bool)
    paired[pairs.ravel()] = True
    if not paired.all():
        msg = f"{int((~paired).sum())} spin(s) have no partner within the pairing cutoff"
        warnings.warn(msg, IsolatedSpinWarning, stacklevel=2)
        notes.append(msg)
    return BathState(pos, couplings, occ.astype(np.int8), pairs, rates, in_core, config,
                     0.0, tuple(notes))


@numba.njit(cache=True)
def _kmc(occ, pi, pj, cum_rate, slow, indptr, adj, couplings, t_end, sample_dt,
         n_samples, seed, record, ev_t, ev_i, ev_j):
    np.random.seed(seed)
    n_pairs = len(pi)
    lam = cum_rate[n_pairs - 1] if n_pairs > 0 else 0.0
    active = np.zeros(n_pairs, np.bool_)
    n_act = np.zeros(2, np.int64)
    for p in range(n_pairs):
        if occ[pi[p]] != occ[pj[p]]:
            active[p] = True
            n_act[1 if slow[p] else 0] += 1
    samples = np.empty(n_samples)
    counts = np.zeros(2, np.int64)
    active_time = np.zeros(2)
    k_sample = 0
    n_ev = 0
    overflow = False
    t = 0.0
    while True:
        if lam > 0.0:
            t_next = t - np.log(1.0 - np.random.random()) / lam
        else:
            t_next = np.inf
        while k_sample < n_samples and k_sample * sample_dt < min(t_next, t_end):
            acc = 0.0
            for s in range(len(occ)):
                acc += couplings[s] * occ[s]
            samples[k_sample] = acc
            k_sample += 1
        if t_next >= t_end:
            active_time[0] += n_act[0] * (t_end - t)
            active_time[1] += n_act[1] * (t_end - t)
            break
        active_time[0] += n_act[0] * (t_next - t)
        active_time[1] += n_act[1] * (t_next - t)
        t = t_next
        u = np.random.random() * lam
        p = np.searchsorted(cum_rate, u, side="right")
        if p >= n_pairs:
            p = n_pairs - 1
        if not active[p]:
            continue
        i = pi[p]
        j = pj[p]
        occ[i] = -occ[i]
        occ[j] = -occ[j]
        for s in (i, j):
            for q_idx in range(indptr[s], indptr[s + 1]):
                q = adj[q_idx]
                now = occ[pi[q]] != occ[pj[q]]
                if now != active[q]:
                    active[q] = now
                    n_act[1 if slow[q] else 0] += 1 if now else -1
        counts[1 if slow[p] else 0] += 1
        if record:
            if n_ev < len(ev_t):
                ev_t[n_ev] = t
                ev_i[n_ev] = i
                ev_j[n_ev] = j
            else:
                overflow = True
        n_ev += 1
    return samples, counts, active_time, n_ev, overflow


def _adjacency(n_spins, pairs):
    deg = np.bincount(pairs.ravel(), minlength=n_spins) if len(pairs) else np.zeros(n_spins, int)
    indptr = np.concatenate([[0], np.cumsum(deg)]).astype(np.int64)
    adj = np.empty(indptr[-1], dtype=np.int64)
    fill = indptr[:-1].copy()
    for p, (i, j) in enumerate(pairs):
        adj[fill[i]] = p
        fill[i] += 1
        adj[fill[j]] = p
        fill[j] += 1
    return indptr, adj


@dataclass(frozen=True, eq=False)
class FieldTrajectory:
    """Field samples ``xi(k dt)`` (rad/s) plus the flip-flop event log."""

    dt: float
    samples: np.ndarray
    seed: int
    event_t: np.ndarray
    event_i: np.ndarray
    event_j: np.ndarray
    event_counts: dict = field(default_factory=dict)
    active_time: dict = field(default_factory=dict)
    initial_occupations: np.ndarray = None
    final_state: BathState = field(default=None, repr=False)
    model_tag: str = "kmc-bath"

    @property
    def times(self):
        return self.dt * np.arange(len(self.samples))

    @property
    def duration(self):
        return self.dt * len(self.samples)

    def empirical_rates(self):
        """Events per unit of anti-aligned pair time, ``{"slow": .., "fast": ..}``."""
        return {
            k: self.event_counts[k] / self.active_time[k] if self.active_time[k] > 0 else np.nan
            for k in ("slow", "fast")
        }

    def to_csv(self, path):
        from .io import write_csv

        write_csv(path, {"t_s": self.times, "xi_rad_per_s": self.samples})

    def events_to_csv(self, path):
        from .io import write_csv

        write_csv(path, {"t_s": self.event_t, "i": self.event_i, "j": self.event_j})


def _run_kmc(state, occ, t_end, sample_dt, n_samples, seed, record):
    pairs = state.pairs
    indptr, adj = _adjacency(state.n_spins, pairs)
    cum = np.cumsum(state.rates) if len(pairs) else np.zeros(0)
    slow = state.pair_slow if len(pairs) else np.zeros(0, bool)
    pi = np.ascontiguousarray(pairs[:, 0]) if len(pairs) else np.zeros(0, np.int64)
    pj = np.ascontiguousarray(pairs[:, 1]) if len(pairs) else np.zeros(0, np.int64)
    seed32 = int(seed) & 0xFFFFFFFF
    cap = int(1.2 * 0.5 * cum[-1] * t_end + 10 * np.sqrt(cum[-1] * t_end + 1) + 1000) if len(pairs) else 1
    if not record:
        cap = 0
    while True:
        work = occ.astype(np.int8).copy()
        ev_t = np.empty(cap)
        ev_i = np.empty(cap, np.int64)
        ev_j = np.empty(cap, np.int64)
        out = _kmc(work, pi, pj, cum, slow, indptr, adj, state.couplings.astype(float),
                   float(t_end), float(sample_dt), int(n_samples), seed32, record,
                   ev_t, ev_i, ev_j)
        samples, counts, active_time, n_ev, overflow = out
        if not overflow:
            break
        cap = 2 * n_ev  # same seed, same path: rerun with room for the full log
    if record:
        ev_t, ev_i, ev_j = ev_t[:n_ev], ev_i[:n_ev], ev_j[:n_ev]
    return work, samples, counts, active_time, (ev_t, ev_i, ev_j)


def evolve(state, duration, sample_dt, seed=None, record_events=True):
    """Exact event-driven evolution of the bath for ``duration`` seconds.

    Candidate events arrive at the total rate of all pairs and pick a pair
    with probability proportional to its rate; only anti-aligned pairs act.
    This thinning construction gives exactly exponential waiting times for
    every pair regardless of how far the rates are apart.  The field is
    sampled every ``sample_dt`` (``round(duration/sample_dt)`` samples from
    t = 0).  The input state is not modified.
    """
    if not sample_dt > 0 or not duration > 0:
        raise DomainError("duration and sample_dt must be > 0")
    if seed is None:
        seed = rng.derive_seed(state.config.seed, "bath-evolve", repr(state.time))
    n_samples = int(round(duration / sample_dt))
    occ0 = state.occupations.copy()
    work, samples, counts, active_time, ev = _run_kmc(
        state, occ0, duration, sample_dt, n_samples, seed, record_events
    )
    final = state.with_occupations(work, state.time + duration)
    return FieldTrajectory(
        sample_dt, samples, int(seed), ev[0], ev[1], ev[2],
        {"fast": int(counts[0]), "slow": int(counts[1])},
        {"fast": float(active_time[0]), "slow": float(active_time[1])},
        occ0, final,
    )


def sample_field(state, duration, sample_dt, seed):
    """Stationary field trajectory of length ``duration`` including its endpoint.

    Occupations are redrawn as fair coins (the stationary law of symmetric
    exchange dynamics) before evolving, so each call is an independent
    realisation.  Returns ``round(duration/sample_dt) + 1`` samples.
    """
    gen = rng.stream(seed, "bath-initial")
    occ = np.where(gen.random(state.n_spins) < 0.5, 1, -1).astype(np.int8)
    n = int(round(duration / sample_dt)) + 1
    _, samples, _, _, _ = _run_kmc(state, occ, n * sample_dt, sample_dt, n, seed, False)
    return samples


def replay_magnetization(initial_occupations, event_i, event_j):
    """Total magnetization after each logged event (for conservation checks)."""
    occ = np.asarray(initial_occupations, dtype=np.int64).copy()
    out = np.empty(len(event_i), dtype=np.int64)
    aligned = 0
    for k, (i, j) in enumerate(zip(event_i, event_j)):
        if occ[i] == occ[j]:
            aligned += 1
        occ[i], occ[j] = -occ[i], -occ[j]
        out[k] = occ.sum()
    if aligned:
        raise DomainError(f"{aligned} logged event(s) act on an aligned pair")
    return out


@dataclass(frozen=True, eq=False)
class CorrelationCurve:
    lags: np.ndarray  # s
    values: np.ndarray
    sigma: np.ndarray


def _autocov(x, max_k):
    n = len(x)
    y = x - x.mean()
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(y, size)
    acov = np.fft.irfft(f * np.conj(f), size)[: max_k + 1]
    return acov / (n - np.arange(max_k + 1))


def estimate_autocorrelation(trajectory, max_lag):
    """Unbiased sample autocovariance at lags ``0 .. max_lag``.

    ``sigma`` is Bartlett's large-sample standard error built from the
    estimated correlations themselves.
    """
    x = np.asarray(trajectory.samples, dtype=float)
    dt = trajectory.dt
    duration = dt * len(x)
    if max_lag > duration / 5 * (1 + 1e-12):
        raise EstimationError(f"max_lag must be <= duration/5 = {duration / 5:g} s")
    max_k = int(np.floor(max_lag / dt + 1e-9))
    if max_k < 1 or len(x) < 10:
        raise EstimationError("not enough samples to estimate a correlation curve")
    wide = min(2 * max_k, len(x) - 1)
    acov = _autocov(x, wide)
    rho = acov / acov[0] if acov[0] > 0 else np.zeros_like(acov)
    m = np.arange(-wide, wide + 1)
    rho_full = rho[np.abs(m)]
    var = np.empty(max_k + 1)
    for k in range(max_k + 1):
        shifted_p = np.where(np.abs(m + k) <= wide, rho[np.minimum(np.abs(m + k), wide)], 0.0)
        shifted_m = np.where(np.abs(m - k) <= wide, rho[np.minimum(np.abs(m - k), wide)], 0.0)
        var[k] = (rho_full**2 + shifted_p * shifted_m).sum() / len(x)
    sigma = acov[0] * np.sqrt(np.maximum(var, 0.0))
    sigma[0] = acov[0] * np.sqrt(2.0 * (rho_full**2).sum() / len(x))
    return CorrelationCurve(dt * np.arange(max_k + 1), acov[: max_k + 1], sigma)


@dataclass(frozen=True)
class CorrelationFit:
    tau_c: float
    sigma_tau_c: float
    amplitude: float
    residual_norm: float
    r_squared: float
    two_exp: tuple = ()
    two_exp_residual_norm: float = np.nan


def fit_correlation_time(curve, two_rate=True):
    """Least-squares fit of ``c exp(-t/tau_c)``.

    With ``two_rate`` a two-exponential fit is also performed and its
    parameters and residual norm reported, so single- and two-rate
    descriptions of the same curve can be compared.
    """
    t = np.asarray(curve.lags, dtype=float)
    y = np.asarray(curve.values, dtype=float)
    if len(t) < 10 or not y[0] > 0:
        raise FitError("need >= 10 points with positive lag-0 value")
    if y[-1] >= 0.9 * y[0] or np.ptp(y) <= 1e-12 * abs(y[0]):
        raise FitError("correlation curve does not decay")
    scale = y[0]
    sel = y > 0.05 * scale
    guess = -1.0 / np.polyfit(t[sel], np.log(y[sel] / scale), 1)[0] if sel.sum() > 2 else t[-1]
    if not guess > 0:
        guess = t[-1]

    def r1(p):
        return (np.exp(p[0]) * np.exp(-t / np.exp(p[1])) - y / scale)

    res = optimize.least_squares(r1, [0.0, np.log(guess)], method="lm", xtol=1e-15,
                                 ftol=1e-15, gtol=1e-15)
    amp, tau = np.exp(res.x[0]) * scale, np.exp(res.x[1])
    if tau > 100 * t[-1]:
        raise FitError("fitted correlation time exceeds 100x the lag window")
    resid = r1(res.x) * scale
    dof = max(len(t) - 2, 1)
    jtj = res.jac.T @ res.jac
    cov = np.linalg.pinv(jtj) * (2 * res.cost / dof)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid**2).sum() / ss_tot if ss_tot > 0 else 1.0
    two, norm2 = (), np.nan
    if two_rate:
        def r2f(p):
            a1, a2, t1, t2 = np.exp(p)
            return a1 * np.exp(-t / t1) + a2 * np.exp(-t / t2) - y / scale

        best = None
        for split in (0.3, 0.5, 0.7):
            p0 = np.log([split, 1 - split, 5 * tau, 0.2 * tau])
            r = optimize.least_squares(r2f, p0, method="trf", max_nfev=2000)
            if best is None or r.cost < best.cost:
                best = r
        a1, a2, t1, t2 = np.exp(best.x)
        if t2 > t1:
            a1, a2, t1, t2 = a2, a1, t2, t1
        two = (float(a1 * scale), float(t1), float(a2 * scale), float(t2))
        norm2 = float(np.linalg.norm(r2f(best.x)) * scale)
    return CorrelationFit(float(tau), float(tau * np.sqrt(max(cov[1, 1], 0.0))), float(amp),
                          float(np.linalg.norm(resid)), float(r2), two, norm2)

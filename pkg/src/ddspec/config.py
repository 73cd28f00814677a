"""Run configuration: YAML text validated against a fixed schema.

Every physical quantity carries its unit in the key name (``tau_s``,
``b_Hz``, ``B_start_T``...).  Unknown keys, keys missing their unit suffix,
and out-of-range values are rejected with distinct error classes.
"""

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import (
    ConfigError,
    ConfigSyntaxError,
    RangeViolationError,
    UnitSuffixError,
    UnknownKeyError,
)

UNIT_SUFFIXES = ("s", "Hz", "T", "nm", "per_s", "per_nm3", "Hz_nm3", "rad", "rad_per_T",
                 "rad_per_s_T", "uT", "ms", "us", "mT", "G", "kHz", "MHz", "disp")

_POS = ("positive", lambda v: v > 0)
_NONNEG = ("non-negative", lambda v: v >= 0)
_ANY = ("any", lambda v: True)

# section -> key -> (type, default, check).  A default of None means optional.
SCHEMA = {
    "model": {
        "kind": (str, "double-lorentzian", ("a known model kind", lambda v: v in (
            "single-lorentzian", "double-lorentzian", "power-law"))),
        "b_Hz": (float, None, _NONNEG),
        "tau_c_s": (float, None, _POS),
        "tau_c_slow_s": (float, None, _POS),
        "tau_c_fast_s": (float, None, _POS),
        "b_fast_Hz": (float, None, _NONNEG),
        "amplitude_disp": (float, None, _NONNEG),
        "alpha": (float, None, ("in (0, 3)", lambda v: 0 < v < 3)),
    },
    "sequence": {
        "kind": (str, "cpmg", ("hahn or cpmg", lambda v: v in ("hahn", "cpmg"))),
        "n_values": (list, [1, 2, 4, 8, 16, 32], ("positive integers", lambda v: all(
            isinstance(x, int) and x >= 1 for x in v))),
        "tau_s": (float, None, _POS),
        "tau_start_s": (float, None, _POS),
        "tau_stop_s": (float, None, _POS),
        "tau_points": (int, 12, ("at least 1", lambda v: v >= 1)),
    },
    "noise": {
        "dt_s": (float, 1e-3, _POS),
        "duration_s": (float, 10.0, _POS),
        "count": (int, 1, ("at least 1", lambda v: v >= 1)),
    },
    "coherence": {
        "method": (str, "analytic", ("analytic or mc", lambda v: v in ("analytic", "mc"))),
        "n_traj": (int, 10000, ("at least 2", lambda v: v >= 2)),
        "dt_s": (float, None, _POS),
        "free_amplitude": (bool, False, _ANY),
    },
    "bath": {
        "n_spins": (int, 400, ("at least 2", lambda v: v >= 2)),
        "geometry": (str, "random-uniform-in-sphere", ("a known geometry", lambda v: v in (
            "random-uniform-in-sphere", "cubic-lattice"))),
        "density_per_nm3": (float, 2.0, _POS),
        "coupling_scale_Hz_nm3": (float, 0.5, _POS),
        "frozen_core_radius_nm": (float, 1.5, _POS),
        "rate_slow_per_s": (float, 0.2, _POS),
        "rate_fast_per_s": (float, 5.0, _POS),
        "pairing_cutoff_nm": (float, 0.8, _POS),
        "min_distance_nm": (float, 1.0, _POS),
        "duration_s": (float, 2000.0, _POS),
        "sample_dt_s": (float, 0.02, _POS),
        "max_lag_s": (float, 20.0, _POS),
        "record_events": (bool, True, _ANY),
    },
    "spectroscopy": {
        "n": (int, 32, ("at least 1", lambda v: v >= 1)),
        "method": (str, "delta", ("delta or inversion", lambda v: v in ("delta", "inversion"))),
        "widened": (bool, False, _ANY),
        "two_amplitude": (bool, False, _ANY),
        "input_csv": (str, None, _ANY),
    },
    "sensor": {
        "S1_rad_per_s_T": (float, None, _ANY),
        "slope_rad_per_T": (float, None, _ANY),
        "T2_s": (float, 1.44, _POS),
        "working_point": (str, "offset-200G", ("a known working point", lambda v: v in (
            "ZEFOZ-near", "offset-200G", "offset-6G", "custom"))),
        "convention": (str, "integral", ("integral or printed", lambda v: v in ("integral", "printed"))),
        "phase_offset_rad": (float, 0.0, _ANY),
    },
    "sweep": {
        "tau_s": (float, 0.666, _POS),
        "B_start_T": (float, 0.0, _ANY),
        "B_stop_T": (float, 2e-6, _ANY),
        "points": (int, 81, ("at least 1", lambda v: v >= 1)),
        "sigma": (float, 0.032, _NONNEG),
        "repeats": (int, 4, ("at least 1", lambda v: v >= 1)),
    },
    "solver": {
        "rel_tol": (float, None, ("in (0, 1)", lambda v: 0 < v < 1)),
    },
    "output": {
        "plots": (bool, False, _ANY),
    },
}
TOP_LEVEL = {"seed": (int, 0, _NONNEG)}

TOLERANCE_PROFILES = {"fast": 1e-8, "strict": 1e-11}


@dataclass
class Config:
    """Validated configuration with defaults filled in.

    ``defaults_applied`` lists the dotted keys that were not given explicitly.
    """

    seed: int
    sections: dict
    defaults_applied: list = field(default_factory=list)
    source_text: str = ""

    def __getitem__(self, name):
        return self.sections[name]

    def get(self, section, key, default=None):
        v = self.sections.get(section, {}).get(key)
        return default if v is None else v

    def to_dict(self):
        return {"seed": self.seed, **copy.deepcopy(self.sections)}

    @property
    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def rel_tol(self, profile="strict"):
        return self.get("solver", "rel_tol", TOLERANCE_PROFILES[profile])

    def tau_grid(self):
        seq = self.sections["sequence"]
        if seq.get("tau_start_s") is not None and seq.get("tau_stop_s") is not None:
            return np.geomspace(seq["tau_start_s"], seq["tau_stop_s"], seq["tau_points"])
        if seq.get("tau_s") is not None:
            return np.array([seq["tau_s"]])
        raise ConfigError("sequence needs tau_s or tau_start_s/tau_stop_s")

    def spectral_model(self):
        from .noise import SpectralModel

        m = self.sections.get("model")
        if not m:
            raise ConfigError("a model section is required")
        need = {"single-lorentzian": ("b_Hz", "tau_c_s"),
                "double-lorentzian": ("b_Hz", "tau_c_slow_s", "tau_c_fast_s"),
                "power-law": ("amplitude_disp", "alpha")}[m["kind"]]
        missing = [k for k in need if m.get(k) is None]
        if missing:
            raise ConfigError(f"model kind {m['kind']} requires "
                              + ", ".join(f"model.{k}" for k in missing))
        return SpectralModel.from_dict(m)

    def bath_config(self):
        from .bath import BathConfig

        b = self.sections["bath"]
        keys = {k: v for k, v in b.items()
                if k not in ("duration_s", "sample_dt_s", "max_lag_s", "record_events")}
        return BathConfig.from_dict(keys, seed=self.seed)

    def sensor(self):
        from .magnetometry import SensorConfig

        s = self.sections["sensor"]
        tau = self.sections["sweep"]["tau_s"]
        common = dict(T2=s["T2_s"], working_point_tag=s["working_point"])
        if s.get("S1_rad_per_s_T") is not None:
            return SensorConfig(S1=s["S1_rad_per_s_T"], **common)
        slope = s.get("slope_rad_per_T")
        if slope is None:
            slope = 3.376e6
        return SensorConfig.from_slope(slope, tau, convention=s["convention"], **common)


def _stem_suffix(key):
    for suf in sorted(UNIT_SUFFIXES, key=len, reverse=True):
        if key.endswith("_" + suf):
            return key[: -len(suf) - 1], suf
    return key, None


def _all_suffixed():
    out = {}
    for sec, spec in SCHEMA.items():
        for cand in spec:
            stem, suf = _stem_suffix(cand)
            if suf is not None:
                out.setdefault(stem, f"{sec}.{cand}")
    return out


def _check_key(section, key, allowed):
    if key in allowed:
        return
    where = f"{section}.{key}" if section else key
    stem, suf = _stem_suffix(key)
    for cand in allowed:
        cstem, csuf = _stem_suffix(cand)
        if csuf is None:
            continue
        if cstem == key or (suf is None and cstem.startswith(key + "_")):
            raise UnitSuffixError(f"{where}: missing unit suffix, expected e.g. {section}.{cand}")
        if suf is not None and cstem == stem:
            raise UnitSuffixError(f"{where}: wrong unit '{suf}', expected {section}.{cand}")
    if suf is None and key in _all_suffixed():
        raise UnitSuffixError(f"{where}: physical quantities need a unit suffix "
                              f"(compare {_all_suffixed()[key]})")
    raise UnknownKeyError(f"unknown key {where}")


def _coerce(section, key, typ, value):
    where = f"{section}.{key}" if section else key
    if typ is float:
        if isinstance(value, str):
            # YAML 1.1 reads unsigned exponents such as 5.0e5 as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")
    return value


def _cross_checks(sections):
    m = sections.get("model", {})
    if m.get("tau_c_fast_s") is not None and m.get("tau_c_slow_s") is not None:
        if m["tau_c_fast_s"] > m["tau_c_slow_s"]:
            raise RangeViolationError(
                f"model.tau_c_fast_s ({m['tau_c_fast_s']}) exceeds model.tau_c_slow_s ({m['tau_c_slow_s']})",
                keys=("model.tau_c_fast_s", "model.tau_c_slow_s"),
            )
    b = sections.get("bath", {})
    if b and b["rate_slow_per_s"] > b["rate_fast_per_s"]:
        raise RangeViolationError(
            f"bath.rate_slow_per_s ({b['rate_slow_per_s']}) exceeds bath.rate_fast_per_s ({b['rate_fast_per_s']})",
            keys=("bath.rate_slow_per_s", "bath.rate_fast_per_s"),
        )
    s = sections.get("sequence", {})
    if s.get("tau_start_s") is not None and s.get("tau_stop_s") is not None:
        if s["tau_start_s"] >= s["tau_stop_s"]:
            raise RangeViolationError(
                "sequence.tau_start_s must be below sequence.tau_stop_s",
                keys=("sequence.tau_start_s", "sequence.tau_stop_s"),
            )
    w = sections.get("sweep", {})
    if w and w["B_start_T"] > w["B_stop_T"]:
        raise RangeViolationError("sweep.B_start_T must not exceed sweep.B_stop_T",
                                  keys=("sweep.B_start_T", "sweep.B_stop_T"))


def parse_config(text):
    """Parse and validate YAML configuration text."""
    try:
        raw = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        col = mark.column + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigSyntaxError(f"malformed configuration: {problem}", line, col) from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigSyntaxError("configuration must be a mapping of sections", 1, 1)
    defaults = []
    seed = 0
    sections = {}
    for top, value in raw.items():
        if top in TOP_LEVEL:
            continue
        if top not in SCHEMA:
            _check_key("", top, list(SCHEMA) + list(TOP_LEVEL))
        if value is not None and not isinstance(value, dict):
            raise ConfigError(f"section {top} must be a mapping")
    if "seed" in raw:
        seed = _coerce("", "seed", int, raw["seed"])
        if seed < 0:
            raise RangeViolationError("seed must be non-negative", keys=("seed",))
    else:
        defaults.append("seed")
    for name, spec in SCHEMA.items():
        given = raw.get(name) or {}
        for key in given:
            _check_key(name, key, spec)
        out = {}
        for key, (typ, default, (desc, ok)) in spec.items():
            if key in given and given[key] is not None:
                v = _coerce(name, key, typ, given[key])
                if not ok(v):
                    raise RangeViolationError(f"{name}.{key} must be {desc}, got {v!r}",
                                              keys=(f"{name}.{key}",))
                out[key] = v
            else:
                out[key] = copy.deepcopy(default)
                if default is not None:
                    defaults.append(f"{name}.{key}")
        sections[name] = out
    _cross_checks(sections)
    return Config(seed, sections, defaults, text)


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        from .errors import DataFileError

        raise DataFileError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)

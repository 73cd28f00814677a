"""Command-line front end.

Every run writes its outputs plus ``manifest.json`` into ``--out``.  A
manifest stores the config text, seeds and output digests, so ``report
--verify`` can re-run the command and confirm byte-identical results.
"""

import argparse
import json
import sys
import tempfile
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import TOLERANCE_PROFILES, load_config, parse_config
from .errors import ConfigError, DataFileError, DDSpecError
from .io import file_digest, read_csv, write_csv
from .rng import derive_seed

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("simulate-noise", "simulate-bath", "decay", "reconstruct", "fit", "sense", "report")
MANIFEST = "manifest.json"


def exit_code_for(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataFileError, OSError)):
        return EXIT_IO
    if isinstance(exc, DDSpecError) and isinstance(exc, ValueError):
        # invalid parameter combinations (domain, resolution, approximation guards)
        return EXIT_CONFIG
    return EXIT_NUMERIC


class Run:
    """Output bookkeeping for one command invocation."""

    def __init__(self, args, config):
        self.args = args
        self.config = config
        self.out = Path(args.out)
        self.outputs = []
        self.seeds = {"seed": config.seed if config is not None else None}
        self.reports = {}

    def seed_for(self, *labels):
        value = derive_seed(self.config.seed, *labels)
        self.seeds[":".join(str(x) for x in labels)] = value
        return value

    def csv(self, name, columns):
        self.outputs.append(write_csv(self.out / name, columns))

    def json(self, name, payload):
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")
        self.outputs.append(path)

    def add(self, paths):
        self.outputs.extend(Path(p) for p in paths)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _rel_tol(run):
    return run.config.rel_tol(run.args.tolerance_profile)


def cmd_simulate_noise(run):
    from .noise import sample_trajectory

    model = run.config.spectral_model()
    sec = run.config["noise"]
    seed = run.seed_for("simulate-noise")
    for k in range(sec["count"]):
        traj = sample_trajectory(model, sec["dt_s"], sec["duration_s"], seed, index=k)
        run.csv(f"noise_{k:03d}.csv", {"t_s": traj.times, "xi_rad_per_s": traj.samples})


def cmd_simulate_bath(run):
    from .bath import build_bath, estimate_autocorrelation, evolve, fit_correlation_time
    from .spectroscopy import compare_models, periodogram_estimate

    sec = run.config["bath"]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        state = build_bath(run.config.bath_config())
    traj = evolve(state, sec["duration_s"], sec["sample_dt_s"], seed=run.seed_for("bath-evolve"),
                  record_events=sec["record_events"])
    run.csv("field.csv", {"t_s": traj.times, "xi_rad_per_s": traj.samples})
    if sec["record_events"]:
        run.csv("events.csv", {"t_s": traj.event_t, "i": traj.event_i, "j": traj.event_j})
    max_lag = min(sec["max_lag_s"], traj.duration / 5)
    corr = estimate_autocorrelation(traj, max_lag)
    run.csv("correlation.csv", {"lag_s": corr.lags, "C_rad2_per_s2": corr.values,
                                "sigma": corr.sigma})
    summary = {"n_pairs": int(len(state.pairs)), "n_core_spins": int(state.in_core.sum()),
               "empirical_rates_per_s": traj.empirical_rates(),
               "configured_rates_per_s": {"slow": state.config.rate_slow,
                                          "fast": state.config.rate_fast},
               "warnings": [str(w.message) for w in caught]}
    fit = fit_correlation_time(corr)
    summary["correlation_fit"] = {"tau_c_s": fit.tau_c, "sigma_tau_c_s": fit.sigma_tau_c,
                                  "residual_norm": fit.residual_norm,
                                  "two_exp": list(fit.two_exp),
                                  "two_exp_residual_norm": fit.two_exp_residual_norm}
    spec = periodogram_estimate(traj.samples, traj.dt)
    spec.to_csv(run.out / "spectrum.csv")
    run.outputs.append(run.out / "spectrum.csv")
    summary["model_comparison"] = [r.to_dict() for r in compare_models(spec, two_amplitude=True)]
    run.json("bath_summary.json", summary)


def _curves(run):
    from .coherence import analytic_curve, mc_coherence_curve
    from .filters import PulseSequence

    model = run.config.spectral_model()
    seq_sec, coh = run.config["sequence"], run.config["coherence"]
    n_values = seq_sec["n_values"]
    taus = run.config.tau_grid()
    curves = []
    for i, tau in enumerate(taus):
        if coh["method"] == "analytic":
            curves.append(analytic_curve(model, tau, n_values, seq_sec["kind"], rel_tol=_rel_tol(run)))
        else:
            seq = PulseSequence.cpmg(max(n_values), tau)
            curves.append(mc_coherence_curve(model, seq, n_values, coh["n_traj"],
                                             seed=run.seed_for("decay", i), dt=coh["dt_s"],
                                             threads=run.args.threads))
    return taus, curves


def cmd_decay(run):
    from .coherence import extract_t2
    from .errors import FitError

    taus, curves = _curves(run)
    rows = {"tau_s": [], "T2_s": [], "sigma_T2_s": [], "ok": []}
    for i, (tau, c) in enumerate(zip(taus, curves)):
        run.csv(f"curves/curve_{i:03d}.csv", {"t_s": c.t, "C": c.C, "sigma_C": c.sigma_C})
        try:
            fit = extract_t2(c, run.config["coherence"]["free_amplitude"])
            vals = (fit.T2, fit.sigma_T2, 1)
        except FitError:
            vals = (np.nan, np.nan, 0)
        rows["tau_s"].append(tau)
        for k, v in zip(("T2_s", "sigma_T2_s", "ok"), vals):
            rows[k].append(v)
    rows["ok"] = np.array(rows["ok"], dtype=int)
    run.csv("t2.csv", rows)
    if run.config["output"]["plots"]:
        from .plotting import export_plotdata

        run.add(export_plotdata(curves, run.out / "decay_panel", svg=True))


def _rates_from_table(path):
    from .spectroscopy import RatePoint

    cols = read_csv(path, required=("tau_s", "T2_s", "sigma_T2_s"))
    ok = cols.get("ok", np.ones_like(cols["tau_s"]))
    out = []
    for tau, t2, s, good in zip(cols["tau_s"], cols["T2_s"], cols["sigma_T2_s"], ok):
        if good and np.isfinite(t2) and t2 > 0:
            out.append(RatePoint(float(tau), 1.0 / t2, s / t2**2))
        else:
            out.append(RatePoint(float(tau), np.nan, np.nan, False, "T2 fit failed"))
    return sorted(out, key=lambda r: r.tau)


def cmd_reconstruct(run):
    from .spectroscopy import decay_rates, reconstruct

    sec = run.config["spectroscopy"]
    n = sec["n"]
    source = run.args.input or sec["input_csv"]
    if source:
        rates = _rates_from_table(source)
    else:
        model = run.config.spectral_model()
        taus = run.config.tau_grid()
        with ThreadPoolExecutor(max_workers=max(1, run.args.threads)) as pool:
            parts = list(pool.map(lambda t: decay_rates(model, n, [t])[0], taus))
        rates = parts
    run.csv("rates.csv", {"tau_s": [r.tau for r in rates], "gamma_per_s": [r.gamma for r in rates],
                          "sigma_gamma_per_s": [r.sigma_gamma for r in rates],
                          "ok": np.array([int(r.ok) for r in rates])})
    spec = reconstruct(rates, n, method=sec["method"], widened=sec["widened"])
    spec.to_csv(run.out / "spectrum.csv")
    run.outputs.append(run.out / "spectrum.csv")
    run.json("reconstruct_report.json", {"band_Hz": list(spec.band), "method": spec.method_tag,
                                         "excluded": list(spec.report), "n": n})
    if run.config["output"]["plots"]:
        from .plotting import export_plotdata

        run.add(export_plotdata(spec, run.out / "spectrum_panel", svg=True))


def cmd_fit(run):
    from .spectroscopy import SpectrumEstimate, compare_models

    sec = run.config["spectroscopy"]
    source = run.args.input or sec["input_csv"]
    if not source:
        raise ConfigError("fit needs --input or spectroscopy.input_csv")
    spec = SpectrumEstimate.from_csv(source)
    ranking = compare_models(spec, two_amplitude=sec["two_amplitude"])
    run.json("fit_report.json", {"ranking": [r.to_dict() for r in ranking],
                                 "best": ranking[0].kind})
    best = ranking[0]
    if best.status != "failed":
        from .noise import evaluate_psd

        run.csv("fit_curve.csv", {"nu_Hz": spec.nu, "S_fit": evaluate_psd(best.model(), spec.nu)})
        if run.config["output"]["plots"]:
            from .plotting import export_plotdata

            run.add(export_plotdata((spec, best), run.out / "spectrum_panel", svg=True))


def cmd_sense(run):
    from .magnetometry import fit_response, sensitivity, simulate_sweep

    sensor = run.config.sensor()
    sw, s_sec = run.config["sweep"], run.config["sensor"]
    b = np.linspace(sw["B_start_T"], sw["B_stop_T"], sw["points"])
    sweep = simulate_sweep(sensor, sw["tau_s"], b, sw["sigma"], seed=run.seed_for("sense"),
                           repeats=sw["repeats"], convention=s_sec["convention"],
                           phase_offset=s_sec["phase_offset_rad"])
    sweep.to_csv(run.out / "sweep.csv")
    run.outputs.append(run.out / "sweep.csv")
    fit = fit_response(sweep)
    delta_phi = float(np.std(fit.residuals, ddof=2))
    db, eta = sensitivity(delta_phi, fit.slope, sweep.T_total)
    run.json("sensitivity.json", {
        "slope_rad_per_T": fit.slope, "sigma_slope_rad_per_T": fit.sigma_slope,
        "delta_phi_rad": delta_phi, "delta_B_min_T": db, "eta_T_per_rtHz": eta,
        "T_total_s": sweep.T_total, "nu_op_Hz": sweep.nu_op, "sensor": sensor.to_dict(),
        "envelope_R": sweep.R,
    })
    if run.config["output"]["plots"]:
        from .plotting import export_plotdata

        run.add(export_plotdata(sweep, run.out / "sensing_panel", svg=True))


def _numeric_outputs(manifest):
    return {k: v for k, v in manifest["outputs"].items() if not k.endswith(".svg")}


def cmd_report(run):
    args = run.args
    if not args.manifest:
        raise ConfigError("report needs --manifest PATH")
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, ValueError) as exc:
        raise DataFileError(f"cannot read manifest {args.manifest}: {exc}") from exc
    root = Path(args.manifest).parent
    on_disk = {}
    for name, digest in manifest["outputs"].items():
        p = root / name
        on_disk[name] = p.exists() and file_digest(p) == digest
    summary = {"command": manifest["command"], "status": manifest["status"],
               "outputs_intact": on_disk}
    if args.verify:
        with tempfile.TemporaryDirectory() as tmp:
            cfg = Path(tmp) / "config.yaml"
            cfg.write_text(manifest["config_text"])
            out = Path(tmp) / "rerun"
            argv = [manifest["command"], "--config", str(cfg), "--out", str(out),
                    "--seed", str(manifest["seeds"]["seed"]),
                    "--threads", str(args.threads if args.threads_given else manifest["threads"]),
                    "--tolerance-profile", manifest["tolerance_profile"]]
            if manifest.get("input"):
                argv += ["--input", manifest["input"]]
            code = main(argv)
            if code != EXIT_OK:
                raise DDSpecError(f"re-run exited with status {code}")
            rerun = json.loads((out / MANIFEST).read_text())
        want, got = _numeric_outputs(manifest), _numeric_outputs(rerun)
        mismatch = sorted(k for k in set(want) | set(got) if want.get(k) != got.get(k))
        summary["verify"] = {"identical": not mismatch, "mismatched": mismatch}
        run.json("report.json", summary)
        if mismatch:
            raise ReproducibilityError(f"{len(mismatch)} output(s) differ: {', '.join(mismatch)}")
    else:
        run.json("report.json", summary)


class ReproducibilityError(DDSpecError, ArithmeticError):
    pass


HANDLERS = {
    "simulate-noise": cmd_simulate_noise, "simulate-bath": cmd_simulate_bath, "decay": cmd_decay,
    "reconstruct": cmd_reconstruct, "fit": cmd_fit, "sense": cmd_sense, "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--seed", type=int, help="override the configured top-level seed")
    common.add_argument("--out", default="ddspec_out", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker threads (speed only)")
    common.add_argument("--tolerance-profile", choices=sorted(TOLERANCE_PROFILES), default="strict")
    parser = argparse.ArgumentParser(prog="ddspec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("reconstruct", "fit"):
            p.add_argument("--input", help="input CSV (T2 table or spectrum)")
        if name == "report":
            p.add_argument("--manifest", help="manifest.json of an earlier run")
            p.add_argument("--verify", action="store_true", help="re-run and compare outputs")
    return parser


def _error_record(exc, code):
    return {"status": "error", "exit_code": code, "error_type": type(exc).__name__,
            "message": str(exc)}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.threads_given = args.threads is not None
    if args.threads is None:
        args.threads = 1
    if not hasattr(args, "input"):
        args.input = None
    started = time.time()
    out = Path(args.out)
    run, code, record = None, EXIT_OK, None
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        config = load_config(args.config) if args.config else parse_config("")
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            config.seed = args.seed
        run = Run(args, config)
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").unlink(missing_ok=True)
        HANDLERS[args.command](run)
    except Exception as exc:  # every failure maps onto a documented exit code
        code = exit_code_for(exc)
        record = _error_record(exc, code)
        print(json.dumps(record), file=sys.stderr)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if record is not None:
            (out / "error.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        _write_manifest(out, argv, args, run, record, started)
    except OSError as exc:
        if code == EXIT_OK:
            code = EXIT_IO
            print(json.dumps(_error_record(exc, code)), file=sys.stderr)
    return code


def _write_manifest(out, argv, args, run, record, started):
    config = run.config if run is not None else None
    outputs = {}
    if run is not None:
        for p in run.outputs:
            p = Path(p)
            if p.exists():
                outputs[p.relative_to(out).as_posix()] = file_digest(p)
    manifest = {
        "command": args.command,
        "argv": argv,
        "status": "ok" if record is None else "error",
        "error": record,
        "config_text": config.source_text if config is not None else None,
        "config_digest": config.digest if config is not None else None,
        "config": config.to_dict() if config is not None else None,
        "defaults_applied": config.defaults_applied if config is not None else None,
        "seeds": run.seeds if run is not None else {},
        "threads": args.threads,
        "tolerance_profile": args.tolerance_profile,
        "input": str(Path(args.input).resolve()) if args.input else None,
        "version": __version__,
        "outputs": dict(sorted(outputs.items())),
        "timing": {"started_unix": started, "wall_s": time.time() - started},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")


if __name__ == "__main__":
    sys.exit(main())

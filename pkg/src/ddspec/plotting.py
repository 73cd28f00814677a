"""Plot-ready tables and static figures for decay, spectrum and sensing panels.

The SVG layer only draws the columns written to the table; nothing is
computed there.
"""

import json
from pathlib import Path

import numpy as np

from .coherence import CoherenceCurve
from .errors import ExportError
from .io import write_csv
from .magnetometry import SensingRun, fit_response
from .noise import evaluate_psd
from .spectroscopy import FitResult, SpectrumEstimate


def _decay_table(curves):
    cols = {"tau_s": [], "t_s": [], "C": [], "sigma_C": [], "minus_log_C": []}
    for c in curves:
        tau = c.sequence.get("tau_s", np.nan) if isinstance(c.sequence, dict) else np.nan
        cols["tau_s"].append(np.full(len(c), tau))
        cols["t_s"].append(c.t)
        cols["C"].append(c.C)
        cols["sigma_C"].append(c.sigma_C)
        with np.errstate(divide="ignore", invalid="ignore"):
            cols["minus_log_C"].append(np.where(c.C > 0, -np.log(c.C), np.nan))
    table = {k: np.concatenate(v) for k, v in cols.items()}
    axes = {"panel": "decay", "x": "t_s", "y": "C", "yerr": "sigma_C", "group": "tau_s",
            "xscale": "log", "yscale": "linear", "xlabel": "t (s)", "ylabel": "coherence"}
    return table, axes


def _spectrum_table(spectrum, fit):
    table = {"nu_Hz": spectrum.nu, "S": spectrum.S, "sigma_S": spectrum.sigma_S}
    if fit is not None:
        table["S_fit"] = evaluate_psd(fit.model(), spectrum.nu)
    axes = {"panel": "spectrum", "x": "nu_Hz", "y": "S", "yerr": "sigma_S",
            "fit": "S_fit" if fit is not None else None, "xscale": "log", "yscale": "log",
            "xlabel": "frequency (Hz)", "ylabel": "S (Hz^2 s)",
            "fit_kind": fit.kind if fit is not None else None}
    return table, axes


def _sensing_table(run):
    fit = fit_response(run)
    order = np.argsort(run.B_ac, kind="stable")
    b = run.B_ac[order]
    table = {"B_ac_uT": b * 1e6, "X_over_R": run.X[order], "Y_over_R": run.Y[order],
             "phi_rad": fit.phi, "phi_fit_rad": fit.slope * b + fit.intercept,
             "residual_rad": fit.residuals}
    axes = {"panel": "sensing", "x": "B_ac_uT", "y": ["X_over_R", "Y_over_R"],
            "phase": "phi_rad", "fit": "phi_fit_rad", "residual": "residual_rad",
            "xlabel": "B_ac (uT)", "slope_rad_per_T": fit.slope}
    return table, axes


def _classify(dataset):
    if isinstance(dataset, CoherenceCurve):
        return _decay_table([dataset])
    if isinstance(dataset, (list, tuple)) and dataset and all(
            isinstance(d, CoherenceCurve) for d in dataset):
        return _decay_table(dataset)
    if isinstance(dataset, SpectrumEstimate):
        return _spectrum_table(dataset, None)
    if (isinstance(dataset, tuple) and len(dataset) == 2
            and isinstance(dataset[0], SpectrumEstimate) and isinstance(dataset[1], FitResult)):
        return _spectrum_table(*dataset)
    if isinstance(dataset, SensingRun):
        return _sensing_table(dataset)
    raise ExportError(f"no plot schema for {type(dataset).__name__}")


def export_plotdata(dataset, prefix, svg=False):
    """Write ``<prefix>.csv`` and ``<prefix>.axes.json`` (and ``<prefix>.svg``).

    Returns the list of written paths.
    """
    table, axes = _classify(dataset)
    prefix = Path(prefix)
    paths = [write_csv(prefix.with_suffix(".csv"), table)]
    meta = prefix.with_suffix(".axes.json")
    meta.write_text(json.dumps(axes, indent=2, sort_keys=True) + "\n")
    paths.append(meta)
    if svg:
        paths.append(_render(table, axes, prefix.with_suffix(".svg")))
    return paths


def _render(table, axes, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "ddspec", "svg.fonttype": "none"}):
        panel = axes["panel"]
        if panel == "sensing":
            fig, (ax, ax2) = plt.subplots(2, 1, figsize=(5, 5), sharex=True)
            x = table["B_ac_uT"]
            ax.plot(x, table["X_over_R"], "o", ms=3, label="X/R")
            ax.plot(x, table["Y_over_R"], "s", ms=3, label="Y/R")
            ax.legend()
            ax2.plot(x, table["residual_rad"], "o", ms=3)
            ax2.set_xlabel(axes["xlabel"])
            ax2.set_ylabel("phase residual (rad)")
        else:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            x, y, e = table[axes["x"]], table[axes["y"]], table[axes["yerr"]]
            if panel == "decay":
                for tau in np.unique(table["tau_s"]):
                    sel = table["tau_s"] == tau
                    ax.errorbar(x[sel], y[sel], e[sel], fmt="o", ms=3, label=f"tau={tau:g} s")
            else:
                ax.errorbar(x, y, e, fmt="o", ms=3)
                if axes.get("fit"):
                    ax.plot(x, table[axes["fit"]], "-")
            ax.set_xscale(axes["xscale"])
            ax.set_yscale(axes["yscale"])
            ax.set_xlabel(axes["xlabel"])
            ax.set_ylabel(axes["ylabel"])
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return Path(path)

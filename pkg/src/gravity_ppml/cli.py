"""Command-line entry points: estimate on a CSV, simulate grids, emit plot data.

Exit codes: 0 when every requested artifact was written, 2 for
configuration problems (bad flags, unknown columns, invalid grid), 1 for
runtime estimation errors. Errors are reported as one-line JSON on stderr.
All numeric output uses shortest round-trip formatting, so values re-read
exactly.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from dataclasses import dataclass, field

import click
import numpy as np
import pandas as pd

from . import bias as bias_mod
from .errors import BadValue, GravityPpmlError
from .estimator import FitOptions, cluster_robust_vcov, fit_three_way, fit_two_way
from .jackknife import PartitionPlan, jackknife_correct, ordering_partition
from .panel import prune_sample, read_panel_csv
from .simulation import run_grid

__all__ = ["RunConfig", "cmd_estimate", "cmd_simulate", "cmd_figures", "main"]

_COMMANDS = ("estimate", "simulate", "figures")
_FE_SPECS = ("three-way", "two-way")
_CORRECTIONS = ("analytical", "jackknife", "se")
_MIN_REPS = 50


class ConfigError(Exception):
    """Invalid configuration; maps to exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    """One CLI invocation, validated before any work starts."""

    command: str
    input_path: str | None = None
    output_path: str = "report"
    formula: str | None = None
    fe_spec: str = "three-way"
    corrections: frozenset = field(default_factory=frozenset)
    jackknife_R: int = 200
    seed: int = 0
    threads: int | None = None
    grid_path: str | None = None

    def __post_init__(self):
        if self.command not in _COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.fe_spec not in _FE_SPECS:
            raise ConfigError(f"unknown fixed-effect layout {self.fe_spec!r}")
        bad = set(self.corrections) - set(_CORRECTIONS)
        if bad:
            raise ConfigError(f"unknown corrections: {sorted(bad)}")
        if self.fe_spec == "two-way" and set(self.corrections) - {"se"}:
            raise ConfigError(
                "two-way models support only the 'se' correction; "
                "point-estimate corrections require the three-way layout"
            )
        if self.jackknife_R < 1:
            raise ConfigError("jackknife replicate count must be >= 1")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")


def _parse_formula(formula: str) -> tuple[str, list[str]]:
    parts = formula.split("~")
    if len(parts) != 2:
        raise ConfigError(f"cannot parse formula {formula!r}; expected 'y ~ x1 + x2'")
    outcome = parts[0].strip()
    regressors = [tok.strip() for tok in parts[1].split("+")]
    if not outcome or any(not tok for tok in regressors) or not regressors:
        raise ConfigError(f"cannot parse formula {formula!r}; expected 'y ~ x1 + x2'")
    return outcome, regressors


def _repr_float(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def cmd_estimate(config: RunConfig) -> list[str]:
    """Fit, apply requested corrections, write report JSON + text table.

    Returns the list of written artifact paths.
    """
    if config.input_path is None:
        raise ConfigError("estimate requires --input")
    if not os.path.exists(config.input_path):
        raise ConfigError(f"input file not found: {config.input_path}")

    sidecar_path = f"{config.input_path}.columns.json"
    sidecar: dict = {}
    if os.path.exists(sidecar_path):
        with open(sidecar_path, "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)

    header = list(pd.read_csv(config.input_path, nrows=0, encoding="utf-8").columns)
    if config.formula is not None:
        outcome, regressors = _parse_formula(config.formula)
        for col in [outcome] + regressors:
            if col not in header:
                raise ConfigError(f"unknown column: {col!r}")
        sidecar["outcome"] = outcome
        sidecar["regressors"] = regressors

    try:
        panel = read_panel_csv(config.input_path, sidecar=sidecar or None)
    except BadValue as exc:
        if "unknown column" in str(exc):
            raise ConfigError(str(exc)) from exc
        raise
    pruned, prune_log = prune_sample(panel)

    opts = FitOptions()
    if config.fe_spec == "three-way":
        fit = fit_three_way(pruned, opts)
    else:
        fit = fit_two_way(pruned, opts)

    report = None
    objects = None
    if config.fe_spec == "three-way":
        if {"analytical", "se"} & set(config.corrections):
            objects = bias_mod.build_bias_objects(pruned, fit)
        if "analytical" in config.corrections:
            report = bias_mod.analytical_bias_correct(fit, objects, report)
        if "se" in config.corrections:
            report = bias_mod.corrected_vcov(pruned, fit, objects, report)
    elif "se" in config.corrections:
        report = bias_mod.two_way_corrected_vcov(pruned, fit, report)

    if report is None:
        report = bias_mod.CorrectionReport(
            regressor_names=fit.arrays.regressor_names,
            beta_uncorrected=fit.beta.copy(),
        )
    if report.se_uncorrected is None:
        vc = cluster_robust_vcov(pruned, fit)
        report.V_uncorrected = vc.V
        report.se_uncorrected = vc.se

    if "jackknife" in config.corrections:
        if config.jackknife_R == 1:
            plan = ordering_partition(pruned)
        else:
            base = ordering_partition(pruned)
            plan = PartitionPlan(
                base.group_a, base.group_b,
                seed=config.seed, replicates=config.jackknife_R,
            )
        report.beta_jackknife = jackknife_correct(pruned, opts, plan, fit=fit)

    report.meta.update(
        {
            "input": config.input_path,
            "formula": config.formula,
            "fe_spec": config.fe_spec,
            "corrections": sorted(config.corrections),
            "jackknife_R": config.jackknife_R if "jackknife" in config.corrections else None,
            "seed": config.seed,
            "n_pairs": pruned.n_pairs,
            "n_obs": pruned.n_obs,
            "pruned_pairs": prune_log.n_removed_pairs,
            "iterations": fit.iterations,
            "deviance": fit.deviance,
        }
    )

    out_json = f"{config.output_path}.json"
    out_txt = f"{config.output_path}.txt"
    with open(out_json, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(out_txt, "w", encoding="utf-8") as fh:
        fh.write(report.table() + "\n")
    return [out_json, out_txt]


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

_ID_COLS = ("dgp", "N", "T", "reps", "replications", "n_failures", "status", "error")
_ESTIMATORS = ("uncorrected", "analytical", "jackknife")
_SE_TYPES = ("uncorrected", "corrected")


def _grid_columns() -> list[str]:
    cols = list(_ID_COLS)
    for e in _ESTIMATORS:
        cols += [f"avg_bias_x100_{e}", f"sd_x100_{e}"]
        for s in _SE_TYPES:
            cols += [
                f"bias_over_se_{e}_{s}",
                f"se_over_sd_{e}_{s}",
                f"coverage95_{e}_{s}",
            ]
    return cols


def _grid_row(result: dict) -> dict:
    cell = result["cell"]
    row = {
        "dgp": cell.get("dgp", ""),
        "N": cell.get("N", ""),
        "T": cell.get("T", "" if str(cell.get("dgp")) != "EX1" else 3),
        "reps": cell.get("reps", ""),
        "status": result["status"],
        "error": result["error"] or "",
        "replications": "",
        "n_failures": "",
    }
    summary = result["summary"]
    if summary is None:
        return row
    row["replications"] = summary.replications
    row["n_failures"] = summary.n_failures
    for e, stats in summary.estimators.items():
        row[f"avg_bias_x100_{e}"] = _repr_float(stats["avg_bias_x100"])
        row[f"sd_x100_{e}"] = _repr_float(stats["sd_x100"])
        for s in _SE_TYPES:
            if s in stats["se_over_sd"]:
                row[f"bias_over_se_{e}_{s}"] = _repr_float(stats["bias_over_se"][s])
                row[f"se_over_sd_{e}_{s}"] = _repr_float(stats["se_over_sd"][s])
                row[f"coverage95_{e}_{s}"] = _repr_float(stats["coverage_95"][s])
    return row


def _load_grid(path: str | None) -> list[dict]:
    if path is None:
        raise ConfigError("a grid configuration file is required (--grid)")
    if not os.path.exists(path):
        raise ConfigError(f"grid file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    cells = obj.get("cells") if isinstance(obj, dict) else obj
    if not isinstance(cells, list) or not cells:
        raise ConfigError("empty grid: no cells to run")
    for cell in cells:
        if not isinstance(cell, dict):
            raise ConfigError("each grid cell must be a JSON object")
        reps = cell.get("reps")
        if not isinstance(reps, int) or reps < _MIN_REPS:
            raise ConfigError(
                f"cell reps must be an integer >= {_MIN_REPS}, got {reps!r}"
            )
    return cells


def cmd_simulate(config: RunConfig) -> list[str]:
    """Run one Monte Carlo per grid cell; write summary CSV + MC-SE JSON."""
    cells = _load_grid(config.grid_path)
    results = run_grid(cells, threads=config.threads)

    out_csv = f"{config.output_path}.csv"
    out_json = f"{config.output_path}_mcse.json"
    cols = _grid_columns()
    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, restval="")
        writer.writeheader()
        for result in results:
            writer.writerow(_grid_row(result))
    mcse = [
        {
            "cell": r["cell"],
            "status": r["status"],
            "replications": r["summary"].replications if r["summary"] else None,
            "mc_standard_errors": r["summary"].mc_standard_errors if r["summary"] else None,
        }
        for r in results
    ]
    with open(out_json, "w", encoding="utf-8") as fh:
        json.dump(mcse, fh, indent=2)
    return [out_csv, out_json]


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def cmd_figures(config: RunConfig) -> list[str]:
    """Emit plot-ready CSVs: raw estimate draws and bias/SE-vs-T curves.

    With --grid, runs the cells and writes both files; with --input
    pointing at a previous simulate CSV, rebuilds the curves only (raw
    draws are not recoverable from summaries).
    """
    curve_cols = [
        "dgp", "N", "T", "reps", "avg_bias_x100",
        "bias_over_se", "se_over_sd", "coverage_95",
    ]
    out_curves = f"{config.output_path}_curves.csv"

    if config.grid_path is not None:
        cells = _load_grid(config.grid_path)
        results = run_grid(cells, threads=config.threads, keep_draws=True)
        density_rows = []
        curve_rows = []
        for r in results:
            summary = r["summary"]
            if summary is None:
                continue
            meta = summary.meta
            ident = (meta.get("dgp"), meta.get("N"), meta.get("T"))
            for est, vals in (summary.draws or {}).items():
                for v in vals:
                    density_rows.append(ident + (est, _repr_float(v)))
            curve_rows.append(
                ident
                + (
                    summary.replications,
                    _repr_float(summary.avg_bias_x100),
                    "" if summary.bias_over_se is None else _repr_float(summary.bias_over_se),
                    "" if summary.se_over_sd is None else _repr_float(summary.se_over_sd),
                    "" if summary.coverage_95 is None else _repr_float(summary.coverage_95),
                )
            )
        curve_rows.sort(key=lambda row: (str(row[0]), row[1], row[2]))
        out_density = f"{config.output_path}_density.csv"
        with open(out_density, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dgp", "N", "T", "estimator", "draw"])
            writer.writerows(density_rows)
        with open(out_curves, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(curve_cols)
            writer.writerows(curve_rows)
        return [out_density, out_curves]

    if config.input_path is not None:
        if not os.path.exists(config.input_path):
            raise ConfigError(f"input file not found: {config.input_path}")
        with open(config.input_path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        needed = {
            "dgp", "N", "T", "replications",
            "avg_bias_x100_uncorrected",
            "bias_over_se_uncorrected_uncorrected",
            "se_over_sd_uncorrected_uncorrected",
            "coverage95_uncorrected_uncorrected",
        }
        if not rows or not needed.issubset(rows[0].keys()):
            raise ConfigError("input is not a simulate summary CSV")
        curve_rows = []
        for row in rows:
            if row.get("status") != "ok":
                continue
            curve_rows.append(
                (
                    row["dgp"], int(row["N"]), int(row["T"]), int(row["replications"]),
                    row["avg_bias_x100_uncorrected"],
                    row["bias_over_se_uncorrected_uncorrected"],
                    row["se_over_sd_uncorrected_uncorrected"],
                    row["coverage95_uncorrected_uncorrected"],
                )
            )
        curve_rows.sort(key=lambda r: (str(r[0]), r[1], r[2]))
        with open(out_curves, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(curve_cols)
            writer.writerows(curve_rows)
        return [out_curves]

    raise ConfigError("figures requires --grid or --input")


# ---------------------------------------------------------------------------
# click wiring
# ---------------------------------------------------------------------------


def _emit_error(exc: Exception, code: int) -> None:
    payload = {
        "error": type(exc).__name__,
        "message": str(exc),
        "exit_code": code,
    }
    click.echo(json.dumps(payload), err=True)
    sys.exit(code)


def _dispatch(config: RunConfig) -> None:
    try:
        if config.command == "estimate":
            artifacts = cmd_estimate(config)
        elif config.command == "simulate":
            artifacts = cmd_simulate(config)
        else:
            artifacts = cmd_figures(config)
    except ConfigError as exc:
        _emit_error(exc, 2)
    except FileNotFoundError as exc:
        _emit_error(exc, 2)
    except GravityPpmlError as exc:
        _emit_error(exc, 1)
    else:
        for path in artifacts:
            click.echo(f"wrote {path}")


def _threads_option(value: int | None) -> int | None:
    if value is not None:
        return value
    env = os.environ.get("GRAVITY_PPML_THREADS")
    return int(env) if env else None


@click.group()
def main():
    """Gravity-model PPML estimation with bias-corrected inference."""


@main.command("estimate")
@click.option("--input", "input_path", required=True, type=str, help="Panel CSV.")
@click.option("--output", "output_path", default="report", show_default=True,
              help="Output path prefix (.json and .txt are written).")
@click.option("--formula", default=None, help="Model formula, e.g. 'y ~ x1 + x2'.")
@click.option("--fe", "fe_spec", default="three-way", show_default=True,
              type=click.Choice(_FE_SPECS), help="Fixed-effect layout.")
@click.option("--correct", "corrections", default="", show_default=False,
              help="Comma-separated subset of analytical,jackknife,se.")
@click.option("--jk-reps", "jackknife_R", default=200, show_default=True,
              help="Random split-panel partitions to average (1 = ordering split).")
@click.option("--seed", default=0, show_default=True, help="Seed for random partitions.")
@click.option("--threads", default=None, type=int, help="Worker processes.")
def _estimate_cmd(input_path, output_path, formula, fe_spec, corrections, jackknife_R, seed, threads):
    """Fit a gravity PPML model on a CSV and write a correction report."""
    try:
        config = RunConfig(
            command="estimate",
            input_path=input_path,
            output_path=output_path,
            formula=formula,
            fe_spec=fe_spec,
            corrections=frozenset(t.strip() for t in corrections.split(",") if t.strip()),
            jackknife_R=jackknife_R,
            seed=seed,
            threads=_threads_option(threads),
        )
    except ConfigError as exc:
        _emit_error(exc, 2)
    _dispatch(config)


@main.command("simulate")
@click.option("--grid", "grid_path", required=True, type=str,
              help="JSON grid configuration (list of cells or {'cells': [...]}).")
@click.option("--output", "output_path", default="simulation", show_default=True,
              help="Output path prefix (.csv and _mcse.json are written).")
@click.option("--threads", default=None, type=int, help="Worker processes.")
def _simulate_cmd(grid_path, output_path, threads):
    """Run Monte Carlo grids and write table-shaped summaries."""
    try:
        config = RunConfig(
            command="simulate",
            grid_path=grid_path,
            output_path=output_path,
            threads=_threads_option(threads),
        )
    except ConfigError as exc:
        _emit_error(exc, 2)
    _dispatch(config)


@main.command("figures")
@click.option("--grid", "grid_path", default=None, type=str,
              help="JSON grid to run with raw draw retention.")
@click.option("--input", "input_path", default=None, type=str,
              help="Existing simulate summary CSV (curves only).")
@click.option("--output", "output_path", default="figures", show_default=True,
              help="Output path prefix (_density.csv and _curves.csv).")
@click.option("--threads", default=None, type=int, help="Worker processes.")
def _figures_cmd(grid_path, input_path, output_path, threads):
    """Emit plot-data CSVs (no rendering)."""
    try:
        config = RunConfig(
            command="figures",
            grid_path=grid_path,
            input_path=input_path,
            output_path=output_path,
            threads=_threads_option(threads),
        )
    except ConfigError as exc:
        _emit_error(exc, 2)
    _dispatch(config)


if __name__ == "__main__":
    main()

"""Command-line front door: simulate, estimate, curve, bandwidth-sweep.

Every command reads an optional JSON config (flags override config fields),
writes its tabular outputs as CSV plus one JSON run summary that echoes the
full configuration, the seed and the package version, so any output file can
be regenerated exactly. Writes are atomic (temp file, then rename).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .basis import MteModelSpec, basis_labels
from .estimators import Dataset, conventional_gamma, efficient_gamma
from .numerics import SeededRng
from .propensity import KernelConfig, fit_propensity, fixed_fit
from .simulation import (
    DgpConfig,
    ExperimentConfig,
    bandwidth_bias_sweep,
    dgp_generate,
    mte_rmse_profile,
    run_experiment,
    true_targets,
)
from .targets import (
    CI_MULTIPLIER,
    estimate_iv,
    estimate_target,
    mte_curve,
    observational_association,
)


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------

def _format(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: str, header, rows) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format(v) for v in row])
    atomic_write_text(path, buffer.getvalue())


def write_json(path: str, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# dataset ingestion / emission
# ---------------------------------------------------------------------------

def ingest_csv(path: str, schema: dict) -> Dataset:
    """Read a dataset CSV under a column-role schema.

    ``schema`` maps roles to column names: {"y": ..., "a": ..., "z": ...,
    "x": [...], "x_discrete": [...]}. Missing values and non-binary treatment
    entries are reported with their (1-based, header-exclusive) row numbers.
    """
    x_cols = list(schema.get("x", []))
    wanted = [schema["y"], schema["a"], schema["z"], *x_cols]
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file, header row required")
        missing_cols = [c for c in wanted if c not in reader.fieldnames]
        if missing_cols:
            raise ValueError(f"{path}: missing columns {missing_cols}")
        records = list(reader)

    bad_rows = []
    bad_treatment = []
    y, a, z = [], [], []
    x = []
    for i, rec in enumerate(records, start=1):
        try:
            values = [float(rec[c]) for c in wanted]
        except (TypeError, ValueError):
            bad_rows.append(i)
            continue
        if any(not np.isfinite(v) for v in values):
            bad_rows.append(i)
            continue
        if values[1] not in (0.0, 1.0):
            bad_treatment.append(i)
            continue
        y.append(values[0])
        a.append(int(values[1]))
        z.append(values[2])
        x.append(values[3:])
    if bad_rows:
        shown = ", ".join(map(str, bad_rows[:10]))
        raise ValueError(f"{path}: missing or unreadable values in rows [{shown}]")
    if bad_treatment:
        shown = ", ".join(map(str, bad_treatment[:10]))
        raise ValueError(f"{path}: treatment not in {{0,1}} in rows [{shown}]")

    x_discrete = tuple(bool(f) for f in schema.get("x_discrete", [False] * len(x_cols)))
    data = Dataset(
        y=np.array(y),
        a=np.array(a),
        x=np.array(x).reshape(len(y), len(x_cols)),
        z=np.array(z),
        x_discrete=x_discrete,
    )
    return data


def emit_dataset_csv(data: Dataset, path: str) -> None:
    """Write a dataset in the canonical column layout (round-trip exact)."""
    header = ["y", "a"] + [f"x{j + 1}" for j in range(data.covariate_dim)] + ["z"]
    rows = [
        [data.y[i], int(data.a[i]), *data.x[i], data.z[i]]
        for i in range(data.n)
    ]
    write_csv(path, header, rows)


def default_schema(covariate_dim: int, x_discrete=None) -> dict:
    return {
        "y": "y",
        "a": "a",
        "z": "z",
        "x": [f"x{j + 1}" for j in range(covariate_dim)],
        "x_discrete": list(x_discrete or [False] * covariate_dim),
    }


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


def _merged(args, config: dict, key: str, default):
    """Flag value if given, else the config field, else the default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    return config.get(key, default)


def _experiment_config(args, config) -> ExperimentConfig:
    kernel = KernelConfig(
        cv_subsample_size=int(_merged(args, config, "cv_subsample_size", 1000)),
        cv_subsample_count=int(_merged(args, config, "cv_subsample_count", 3)),
    )
    model = MteModelSpec(
        poly_order=int(_merged(args, config, "poly_order", 1)),
        interactions=bool(_merged(args, config, "interactions", False)),
        covariate_dim=int(config.get("covariate_dim", 1)),
    )
    return ExperimentConfig(
        kernel=kernel,
        model=model,
        known_propensity=bool(_merged(args, config, "known_propensity", False)),
        oracle_n=int(config.get("oracle_n", 1_000_000)),
    )


def _summary(command: str, merged_config: dict, seed: int, outputs: list, extra=None) -> dict:
    payload = {
        "command": command,
        "config": merged_config,
        "seed": seed,
        "version": __version__,
        # basenames only: summaries must be byte-identical across output dirs
        "outputs": sorted(os.path.basename(p) for p in outputs),
    }
    if extra:
        payload.update(extra)
    return payload


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    config = _load_config(args.config)
    seed = int(_merged(args, config, "seed", 20250101))
    n = int(_merged(args, config, "n", 5000))
    reps = int(_merged(args, config, "reps", 200))
    eta_grid = args.eta_bar or config.get("eta_bar", [0.2, 0.4, 0.6, 0.8, 1.0])
    eta_grid = [float(e) for e in eta_grid]
    v_grid = [float(v) for v in config.get("v_grid", np.round(np.arange(0.1, 0.91, 0.1), 10))]
    excfg = _experiment_config(args, config)

    result = run_experiment(eta_grid, reps, n, seed, excfg)
    out = args.out
    outputs = []

    rows = []
    labels = basis_labels(excfg.model)
    for cell in result.cells:
        for method in ("conventional", "efficient"):
            rows.append([f"{method}:gamma_aggregate", cell.eta_bar, cell.gamma_rmse_aggregate[method]])
            for j, label in enumerate(labels):
                rows.append([f"{method}:{label}", cell.eta_bar, cell.gamma_rmse[method][j]])
    path = os.path.join(out, "gamma_rmse.csv")
    write_csv(path, ["series", "x", "y"], rows)
    outputs.append(path)

    rows = []
    for cell in result.cells:
        for method in ("conventional", "efficient"):
            for kind in ("ATE", "ATT", "ATU", "ASG"):
                rows.append([f"{method}:{kind}", cell.eta_bar, cell.target_rmse[method][kind]])
    path = os.path.join(out, "target_rmse.csv")
    write_csv(path, ["series", "x", "y"], rows)
    outputs.append(path)

    rows = []
    for cell in result.cells:
        for method in ("conventional", "efficient"):
            for j, label in enumerate(labels):
                rows.append([f"{method}:{label}", cell.eta_bar, cell.gamma_bias[method][j]])
            for kind in ("ATE", "ATT", "ATU", "ASG"):
                rows.append([f"{method}:target:{kind}", cell.eta_bar, cell.target_bias[method][kind]])
    path = os.path.join(out, "bias.csv")
    write_csv(path, ["series", "x", "y"], rows)
    outputs.append(path)

    profile_eta = eta_grid[0]
    profile = mte_rmse_profile(v_grid, reps, n, profile_eta, seed, excfg)
    rows = []
    for method in ("conventional", "efficient"):
        for i, v in enumerate(profile.v_grid):
            rows.append([f"{method}:mte_rmse", v, profile.rmse[method][i]])
    for i, v in enumerate(profile.v_grid):
        rows.append(["skipped_replications", v, int(profile.skipped[i])])
    path = os.path.join(out, "mte_rmse.csv")
    write_csv(path, ["series", "x", "y"], rows)
    outputs.append(path)

    merged = {
        "n": n,
        "reps": reps,
        "eta_bar": eta_grid,
        "v_grid": list(map(float, v_grid)),
        "mte_profile_eta": profile_eta,
        "known_propensity": excfg.known_propensity,
        "poly_order": excfg.model.poly_order,
        "interactions": excfg.model.interactions,
        "cv_subsample_size": excfg.kernel.cv_subsample_size,
        "cv_subsample_count": excfg.kernel.cv_subsample_count,
    }
    extra = {
        "failed_replications": {str(c.eta_bar): c.n_failed for c in result.cells},
        "truth": {
            str(c.eta_bar): {"ATE": c.truth.ate, "ATT": c.truth.att, "ATU": c.truth.atu, "ASG": c.truth.asg}
            for c in result.cells
        },
    }
    summary_path = os.path.join(out, "run_summary.json")
    write_json(summary_path, _summary("simulate", merged, seed, outputs + [summary_path], extra))
    return 0


def _load_or_simulate_dataset(args, config, seed):
    if args.data:
        schema = config.get("columns")
        if schema is None:
            x_cols = config.get("covariate_dim", 1)
            schema = default_schema(x_cols, config.get("x_discrete"))
        else:
            schema = {
                "y": schema["y"],
                "a": schema["a"],
                "z": schema["z"],
                "x": schema.get("x", []),
                "x_discrete": config.get("x_discrete", [False] * len(schema.get("x", []))),
            }
        return ingest_csv(args.data, schema), None
    n = int(_merged(args, config, "n", 10000))
    eta_bar = float((args.eta_bar or config.get("eta_bar", [0.5]))[0])
    dgp = DgpConfig(n=n, eta_bar=eta_bar, seed=seed)
    data, truth = dgp_generate(dgp)
    return data, truth


def cmd_estimate(args) -> int:
    config = _load_config(args.config)
    seed = int(_merged(args, config, "seed", 20250101))
    excfg = _experiment_config(args, config)
    data, truth = _load_or_simulate_dataset(args, config, seed)
    spec = MteModelSpec(excfg.model.poly_order, excfg.model.interactions, data.covariate_dim)

    if excfg.known_propensity:
        if truth is None:
            raise ValueError("--known-propensity is only available for simulated data")
        fit = fixed_fit(truth.pi, excfg.kernel, clamp=False)
    else:
        fit = fit_propensity(data, excfg.kernel, SeededRng(seed).substream(9))

    method = _merged(args, config, "method", "efficient")
    methods = ("conventional", "efficient") if method == "both" else (method,)
    conv = conventional_gamma(data, fit, spec, include_naive=True)
    eff = efficient_gamma(data, fit, spec)
    out = args.out
    outputs = []

    labels = basis_labels(spec)
    for m, est in (("conventional", conv), ("efficient", eff)):
        if m not in methods:
            continue
        se = est.standard_errors
        ci_lo = est.gamma - CI_MULTIPLIER * se
        ci_hi = est.gamma + CI_MULTIPLIER * se
        table = [
            ["Estimate", *est.gamma],
            ["Standard Error", *se],
            ["95% CI-Lower", *ci_lo],
            ["95% CI-Upper", *ci_hi],
        ]
        path = os.path.join(out, f"gamma_{m}.csv")
        write_csv(path, ["", *labels], table)
        outputs.append(path)

    kinds = ("ATE", "ATT", "ATU", "ASG", "IV")
    summary_targets = {}
    for m in methods:
        estimates = {}
        for kind in kinds:
            if kind == "IV":
                estimates[kind] = estimate_iv(data, fit, spec, conv, method=m)
            else:
                estimates[kind] = estimate_target(kind, data, fit, spec, conv, method=m)
        table = [
            ["Estimate", *[estimates[k].point for k in kinds]],
            ["Standard Error", *[estimates[k].se for k in kinds]],
            ["95% CI-Lower", *[estimates[k].ci_lower for k in kinds]],
            ["95% CI-Upper", *[estimates[k].ci_upper for k in kinds]],
        ]
        path = os.path.join(out, f"targets_{m}.csv")
        write_csv(path, ["", *kinds], table)
        outputs.append(path)
        summary_targets[m] = {k: estimates[k].point for k in kinds}

    merged = {
        "n": data.n,
        "method": method,
        "known_propensity": excfg.known_propensity,
        "poly_order": spec.poly_order,
        "interactions": spec.interactions,
        "data": args.data or "simulated",
    }
    extra = {
        "targets": summary_targets,
        "observational_association": observational_association(data),
        # uncorrected least-squares SEs, for comparison with the corrected table
        "naive_gamma_standard_errors": [
            float(v) for v in np.sqrt(np.clip(np.diag(conv.naive_covariance), 0.0, None))
        ],
    }
    summary_path = os.path.join(out, "run_summary.json")
    write_json(summary_path, _summary("estimate", merged, seed, outputs + [summary_path], extra))
    return 0


def cmd_curve(args) -> int:
    config = _load_config(args.config)
    seed = int(_merged(args, config, "seed", 20250101))
    excfg = _experiment_config(args, config)
    data, truth = _load_or_simulate_dataset(args, config, seed)
    spec = MteModelSpec(excfg.model.poly_order, excfg.model.interactions, data.covariate_dim)
    if excfg.known_propensity:
        if truth is None:
            raise ValueError("--known-propensity is only available for simulated data")
        fit = fixed_fit(truth.pi, excfg.kernel, clamp=False)
    else:
        fit = fit_propensity(data, excfg.kernel, SeededRng(seed).substream(9))

    method = _merged(args, config, "method", "efficient")
    if method == "both":
        method = "efficient"
    conv = conventional_gamma(data, fit, spec)
    gamma_est = efficient_gamma(data, fit, spec) if method == "efficient" else conv

    grid = config.get("v_grid")
    if grid is None:
        lo, hi = float(fit.fitted.min()), float(fit.fitted.max())
        grid = np.linspace(lo, hi, 41)
    curve = mte_curve(gamma_est, data, fit, spec, np.asarray(grid, dtype=float))

    out = args.out
    path = os.path.join(out, "curve.csv")
    rows = [
        [curve.v_grid[i], curve.estimate[i], curve.ci_lower[i], curve.ci_upper[i]]
        for i in range(len(curve.v_grid))
    ]
    write_csv(path, ["v", "estimate", "ci_lower", "ci_upper"], rows)
    merged = {
        "n": data.n,
        "method": method,
        "known_propensity": excfg.known_propensity,
        "v_grid": [float(v) for v in curve.v_grid],
        "data": args.data or "simulated",
    }
    summary_path = os.path.join(out, "run_summary.json")
    write_json(summary_path, _summary("curve", merged, seed, [path, summary_path]))
    return 0


def cmd_bandwidth_sweep(args) -> int:
    config = _load_config(args.config)
    seed = int(_merged(args, config, "seed", 20250101))
    n = int(_merged(args, config, "n", 5000))
    reps = int(_merged(args, config, "reps", 100))
    eta_bar = float((args.eta_bar or config.get("eta_bar", [0.6]))[0])
    kappas = [float(k) for k in config.get("kappas", [-0.2, -0.1, 0.0, 0.1, 0.2, 0.4])]
    excfg = _experiment_config(args, config)

    result = bandwidth_bias_sweep(kappas, reps, n, eta_bar, seed, excfg)
    labels = basis_labels(excfg.model)
    rows = []
    for ki, kappa in enumerate(result.kappas):
        h_eff = result.constants[ki]
        for method in ("conventional", "efficient"):
            for j, label in enumerate(labels):
                rows.append([kappa, h_eff, f"{method}:{label}", result.gamma_bias[method][ki][j]])
            for kind in ("ATE", "ATT", "ATU", "ASG"):
                rows.append([kappa, h_eff, f"{method}:target:{kind}", result.target_bias[method][kind][ki]])
    out = args.out
    path = os.path.join(out, "bandwidth_bias.csv")
    write_csv(path, ["kappa", "h_constant", "series", "bias"], rows)
    merged = {
        "n": n,
        "reps": reps,
        "eta_bar": eta_bar,
        "kappas": kappas,
        "known_propensity": excfg.known_propensity,
    }
    extra = {"failed_replications": result.n_failed}
    summary_path = os.path.join(out, "run_summary.json")
    write_json(summary_path, _summary("bandwidth-sweep", merged, seed, [path, summary_path], extra))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtefit",
        description="Marginal-treatment-effect estimation and simulation toolkit",
    )
    parser.add_argument("--version", action="version", version=f"mtefit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its fields")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--n", type=int, help="sample size")
        p.add_argument("--reps", type=int, help="number of replications")
        p.add_argument("--eta-bar", type=float, nargs="+", help="instrument strength value(s)")
        p.add_argument("--poly-order", type=int, help="latent polynomial order S")
        p.add_argument("--interactions", action="store_true", default=None,
                       help="include covariate interactions in the basis")
        p.add_argument("--known-propensity", action="store_true", default=None,
                       help="diagnostic: bypass propensity fitting with the true values")
        p.add_argument("--method", choices=("conventional", "efficient", "both"),
                       help="which estimates to report")
        p.add_argument("--cv-subsample-size", type=int, help="CV subsample size")
        p.add_argument("--cv-subsample-count", type=int, help="number of CV subsamples")

    p_sim = sub.add_parser("simulate", help="replication experiment over instrument strengths")
    common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_est = sub.add_parser("estimate", help="coefficient and target tables for one dataset")
    common(p_est)
    p_est.add_argument("--data", help="input dataset CSV (simulated data when omitted)")
    p_est.set_defaults(func=cmd_estimate)

    p_curve = sub.add_parser("curve", help="treatment-effect curve with confidence bands")
    common(p_curve)
    p_curve.add_argument("--data", help="input dataset CSV (simulated data when omitted)")
    p_curve.set_defaults(func=cmd_curve)

    p_bw = sub.add_parser("bandwidth-sweep", help="bias tables across bandwidth offsets")
    common(p_bw)
    p_bw.set_defaults(func=cmd_bandwidth_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

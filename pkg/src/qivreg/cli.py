"""Command-line surface: select, fit, predict, simulate.

Every command resolves its inputs, computes in memory, then writes outputs
through a temp-then-rename step; the run manifest (config hash, seed, file
digests, warnings) is written last, so its presence implies completeness.
Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys
import warnings

import numpy as np
import jsonschema

from . import __version__
from .data import Dataset, load_csv, load_predictor_csv, standardize
from .errors import (
    InputOutputError,
    MissingUStarColumns,
    QivregError,
    QivregWarning,
    ValidationError,
)
from .estimator import QuasiIVRegressor, run_selection
from .instrument import InstrumentPlan
from .plm import PLMFit
from .predict import bundle_predictions, predict_adjusted, predict_working
from .simulate import (
    BetaSpec,
    ExperimentConfig,
    MetricsTable,
    resolve_threads,
    run_experiment,
)

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["n", "p", "rho", "beta", "reps", "seed"],
    "properties": {
        "n": {"type": "integer", "minimum": 2},
        "p": {"type": "integer", "minimum": 2},
        "rho": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta": {
            "type": "object",
            "additionalProperties": False,
            "required": ["type_id", "sparse", "seed"],
            "properties": {
                "type_id": {"enum": ["I", "II", "III", "long"]},
                "sparse": {"type": "boolean"},
                "seed": {"type": "integer"},
            },
        },
        "reps": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "sigma": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "r2": {"type": ["number", "null"], "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "methods": {
            "type": "array",
            "items": {"enum": ["m1", "m2", "ds_baseline", "ls_baseline"]},
            "minItems": 1,
        },
        "lambda_mode": {
            "anyOf": [{"enum": ["empirical", "theoretical"]}, {"type": "number", "exclusiveMinimum": 0}]
        },
        "tau": {"type": "number", "minimum": 0},
        "d_mode": {"anyOf": [{"const": "auto"}, {"type": "integer", "minimum": 1}]},
        "d_max": {"type": "integer", "minimum": 1},
        "sis_keep": {"type": ["integer", "null"], "minimum": 1},
        "test_size": {"type": "integer", "minimum": 1},
        "bandwidth": {"anyOf": [{"const": "gcv"}, {"type": "number", "exclusiveMinimum": 0}]},
        "ridge_c": {"type": "number", "exclusiveMinimum": 0},
        "ridge_ck": {"type": "number", "exclusiveMinimum": 0},
        "rank_tol": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "lambda_realizations": {"type": "integer", "minimum": 1},
        "mse_target": {"enum": ["selected_beta", "significant_only"]},
    },
}


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_text(path, text):
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise InputOutputError(f"cannot write {path}: {exc}") from exc


def _float_cell(x):
    return repr(float(x))


def _csv_text(header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(c) for c in row))
    return "\n".join(lines) + "\n"


def _write_manifest(out_dir, command, resolved, input_files, output_files, seed, warnings_list, started):
    inventory = {}
    for name in output_files:
        inventory[name] = _sha256_file(os.path.join(out_dir, name))
    inputs = {os.path.basename(p): _sha256_file(p) for p in input_files}
    payload = json.dumps({"command": command, "resolved": resolved, "inputs": inputs}, sort_keys=True)
    manifest = {
        "command": command,
        "config_hash": hashlib.sha256(payload.encode()).hexdigest(),
        "master_seed": seed,
        "tool_version": __version__,
        "timestamps": {
            "started": started,
            "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        },
        "resolved_options": resolved,
        "inputs": inputs,
        "outputs": inventory,
        "warnings": warnings_list,
    }
    _write_text(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _ensure_outdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise InputOutputError(f"cannot create output directory {path}: {exc}") from exc


def _parse_lambda(text):
    if text in ("empirical", "theoretical"):
        return text
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(
            f"--lambda must be 'empirical', 'theoretical' or a number, got {text!r}"
        ) from None
    if value <= 0:
        raise ValidationError("--lambda value must be positive")
    return value


def _parse_d(text):
    if text == "auto":
        return "auto"
    try:
        value = int(text)
    except ValueError:
        raise ValidationError(f"--d must be 'auto' or an integer, got {text!r}") from None
    if value < 1:
        raise ValidationError("--d must be >= 1")
    return value


def _parse_bandwidth(text):
    if text == "gcv":
        return "gcv"
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(f"--bandwidth must be 'gcv' or a number, got {text!r}") from None
    if value <= 0:
        raise ValidationError("--bandwidth value must be positive")
    return value


def _fit_regressor(args):
    ds_raw = load_csv(args.input)
    model = QuasiIVRegressor(
        method=args.method,
        lambda_mode=_parse_lambda(args.lam),
        tau=args.tau,
        sis_keep=args.sis,
        d=_parse_d(args.d),
        d_max=args.d_max,
        bandwidth=_parse_bandwidth(args.bandwidth),
        ridge_c=args.c,
        ridge_ck=args.ck,
        rank_tol=args.rank_tol,
        lambda_realizations=args.lambda_reps,
        ci_level=args.ci_level,
        random_state=args.seed,
    )
    model.fit(ds_raw.X, ds_raw.y)
    return ds_raw, model


def cmd_select(args):
    started = _now()
    ds_raw = load_csv(args.input)
    ds = standardize(Dataset.from_arrays(ds_raw.X, ds_raw.y))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", QivregWarning)
        stage = run_selection(
            ds,
            lambda_mode=_parse_lambda(args.lam),
            tau=args.tau,
            sis_keep=args.sis,
            lambda_realizations=args.lambda_reps,
            lambda_seed=args.seed,
        )
    notes = [str(w.message) for w in caught if issubclass(w.category, QivregWarning)]
    _ensure_outdir(args.output_dir)
    beta_std = stage.result.beta_full.beta
    beta_orig = beta_std / ds.column_scales
    rows = [
        (j + 1, _float_cell(beta_orig[j]), _float_cell(beta_std[j]))
        for j in range(ds.p)
    ]
    _write_text(
        os.path.join(args.output_dir, "beta_full.csv"),
        _csv_text(("index", "beta", "beta_standardized"), rows),
    )
    _write_text(
        os.path.join(args.output_dir, "selected_indices.csv"),
        _csv_text(("index",), [(j,) for j in stage.result.selected]),
    )
    resolved = {
        "input": os.path.abspath(args.input),
        "lambda": args.lam,
        "lambda_used": stage.lambda_used,
        "sigma_hat": stage.sigma_used,
        "tau": args.tau,
        "sis": args.sis,
        "seed": args.seed,
        "lambda_reps": args.lambda_reps,
    }
    _write_manifest(
        args.output_dir, "select", resolved, [args.input],
        ["beta_full.csv", "selected_indices.csv"], args.seed, notes, started,
    )
    return 0


def _fit_document(model):
    return {
        "tool_version": __version__,
        "standardization": {
            "column_means": model.dataset_.column_means.tolist(),
            "column_scales": model.dataset_.column_scales.tolist(),
            "y_mean": model.dataset_.y_mean,
        },
        "selection": {
            "selected": list(model.selected_),
            "u_indices": list(model.u_indices_),
            "screened": None
            if model.selection_.screened_indices is None
            else list(model.selection_.screened_indices),
            "beta_full_standardized": model.selection_.beta_full.beta.tolist(),
            "lambda_used": model.lambda_used_,
            "sigma_hat": model.sigma_hat_,
            "tau": model.tau,
        },
        "plan": model.plan_.to_dict(),
        "plm": model.plm_.to_dict(),
        "ls_theta_raw": model.ls_coef_.tolist(),
        "bandwidth": model.h_,
        "gcv_used": model.gcv_used_,
    }


def cmd_fit(args):
    started = _now()
    _, model = _fit_regressor(args)
    _ensure_outdir(args.output_dir)
    ci = model.ci_
    theta_rows = [
        (j, _float_cell(t), _float_cell(lo), _float_cell(hi))
        for j, t, (lo, hi) in zip(model.selected_, model.theta_, ci)
    ]
    _write_text(
        os.path.join(args.output_dir, "theta.csv"),
        _csv_text(("index", "theta", "ci_lo", "ci_hi"), theta_rows),
    )
    _write_text(
        os.path.join(args.output_dir, "fit.json"),
        json.dumps(_fit_document(model), indent=2, sort_keys=True) + "\n",
    )
    resolved = {
        "input": os.path.abspath(args.input),
        "method": args.method,
        "lambda": args.lam,
        "lambda_used": model.lambda_used_,
        "sigma_hat": model.sigma_hat_,
        "tau": args.tau,
        "sis": args.sis,
        "d": args.d,
        "d_max": args.d_max,
        "bandwidth": args.bandwidth,
        "bandwidth_used": model.h_,
        "c": args.c,
        "ck": args.ck,
        "rank_tol": args.rank_tol,
        "ci_level": args.ci_level,
        "seed": args.seed,
        "lambda_reps": args.lambda_reps,
    }
    notes = list(model.warnings_)
    if model.plm_.degenerate_weights:
        notes.append(
            f"{model.plm_.degenerate_weights} training rows fell back to uniform kernel weights"
        )
    _write_manifest(
        args.output_dir, "fit", resolved, [args.input],
        ["theta.csv", "fit.json"], args.seed, notes, started,
    )
    return 0


def cmd_predict(args):
    started = _now()
    try:
        with open(args.fit, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputOutputError(f"cannot read {args.fit}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{args.fit} is not valid JSON: {exc}") from exc
    X_new, y_true = load_predictor_csv(args.input)
    std = doc["standardization"]
    means = np.asarray(std["column_means"], dtype=float)
    scales = np.asarray(std["column_scales"], dtype=float)
    y_mean = float(std["y_mean"])
    p = means.shape[0]
    selected = np.asarray(doc["selection"]["selected"], dtype=int)
    u_indices = np.asarray(doc["selection"]["u_indices"], dtype=int)
    if X_new.shape[1] != p:
        raise MissingUStarColumns(
            f"prediction input has {X_new.shape[1]} columns; the fit used {p} "
            "(removed-block columns required for the adjusted predictor)"
        )
    plan = InstrumentPlan.from_dict(doc["plan"])
    plm = PLMFit.from_dict(doc["plm"])
    X_std = (X_new - means) / scales
    Z_new = X_std[:, selected - 1]
    U_new = X_std[:, u_indices - 1]
    y_adj, degenerate = predict_adjusted(plm, plan, Z_new, U_new)
    y_adj = y_adj + y_mean
    y_work = predict_working(plm, Z_new) + y_mean
    ls_theta = np.asarray(doc["ls_theta_raw"], dtype=float)
    y_ls = X_new[:, selected - 1] @ ls_theta

    _ensure_outdir(args.output_dir)
    rows = [
        (i, _float_cell(a), _float_cell(w), _float_cell(l))
        for i, (a, w, l) in enumerate(zip(y_adj, y_work, y_ls))
    ]
    _write_text(
        os.path.join(args.output_dir, "predictions.csv"),
        _csv_text(("row_id", "y_adjusted", "y_working", "y_ls"), rows),
    )
    outputs = ["predictions.csv"]
    notes = []
    if degenerate:
        notes.append(f"{degenerate} prediction rows fell back to uniform kernel weights")
    if y_true is not None:
        bundle = bundle_predictions(y_true, y_adj, y_work, y_ls)
        pe = {
            "pe_adjusted": bundle.pe_adjusted,
            "pe_working": bundle.pe_working,
            "pe_ls": bundle.pe_ls,
        }
        _write_text(
            os.path.join(args.output_dir, "prediction_error.json"),
            json.dumps(pe, indent=2, sort_keys=True) + "\n",
        )
        outputs.append("prediction_error.json")
    resolved = {"fit": os.path.abspath(args.fit), "input": os.path.abspath(args.input)}
    _write_manifest(
        args.output_dir, "predict", resolved, [args.fit, args.input],
        outputs, None, notes, started,
    )
    return 0


def _metrics_svg(table: MetricsTable) -> str:
    """Static grouped bar chart of the metrics grid: MSE panel and PE panel."""
    labels = [f"{r.estimator}/{r.predictor}" for r in table.rows]
    panels = [("MSE", [r.mse for r in table.rows]), ("PE", [r.pe for r in table.rows])]
    bar_w, gap, panel_gap, height = 46, 14, 80, 360
    chart_h = 240
    n_bars = len(labels)
    panel_w = n_bars * (bar_w + gap) + gap
    width = 2 * panel_w + panel_gap + 40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for pi, (title, values) in enumerate(panels):
        x0 = 20 + pi * (panel_w + panel_gap)
        vmax = max(max(values), 1e-12)
        parts.append(f'<text x="{x0 + panel_w / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>')
        parts.append(f'<line x1="{x0}" y1="{30 + chart_h}" x2="{x0 + panel_w}" y2="{30 + chart_h}" stroke="black"/>')
        for bi, (label, v) in enumerate(zip(labels, values)):
            h = chart_h * v / vmax
            bx = x0 + gap + bi * (bar_w + gap)
            by = 30 + chart_h - h
            parts.append(
                f'<rect x="{bx:.1f}" y="{by:.1f}" width="{bar_w}" height="{h:.1f}" fill="#4878a8"/>'
            )
            parts.append(
                f'<text x="{bx + bar_w / 2:.1f}" y="{by - 4:.1f}" text-anchor="middle">{v:.4g}</text>'
            )
            parts.append(
                f'<text x="{bx + bar_w / 2:.1f}" y="{30 + chart_h + 12}" text-anchor="middle" '
                f'transform="rotate(30 {bx + bar_w / 2:.1f} {30 + chart_h + 12})">{label}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputOutputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise ValidationError(f"config schema violation at {where}: {exc.message}") from exc
    if (doc.get("sigma") is None) == (doc.get("r2") is None):
        raise ValidationError("config must supply exactly one of 'sigma' / 'r2'")
    beta = doc["beta"]
    known = {
        "n", "p", "rho", "reps", "seed", "sigma", "r2", "lambda_mode", "tau",
        "d_mode", "d_max", "sis_keep", "test_size", "bandwidth", "ridge_c",
        "ridge_ck", "rank_tol", "lambda_realizations", "mse_target",
    }
    kwargs = {k: doc[k] for k in known if k in doc}
    return ExperimentConfig(
        beta=BetaSpec(type_id=beta["type_id"], sparse=bool(beta["sparse"]), seed=int(beta["seed"])),
        methods=tuple(doc.get("methods", ("m1", "m2", "ds_baseline", "ls_baseline"))),
        **kwargs,
    )


def cmd_simulate(args):
    started = _now()
    config = load_experiment_config(args.config)
    overrides = {}
    if args.reps is not None:
        overrides["reps"] = args.reps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        doc = config.to_dict()
        doc.update(overrides)
        config = ExperimentConfig.from_dict(doc)
    threads = resolve_threads(args.threads)
    table = run_experiment(config, threads=threads)
    _ensure_outdir(args.output_dir)
    outputs = ["metrics.csv", "report.json"]
    _write_text(os.path.join(args.output_dir, "metrics.csv"), table.to_csv_text())
    _write_text(
        os.path.join(args.output_dir, "report.json"),
        json.dumps(table.to_report(), indent=2, sort_keys=True) + "\n",
    )
    if args.plot:
        _write_text(os.path.join(args.output_dir, "plot.svg"), _metrics_svg(table))
        outputs.append("plot.svg")
    resolved = {
        "config": os.path.abspath(args.config),
        "reps": config.reps,
        "seed": config.seed,
        "threads": threads,
        "plot": bool(args.plot),
    }
    _write_manifest(
        args.output_dir, "simulate", resolved, [args.config],
        outputs, config.seed, table.warnings, started,
    )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qivreg",
        description="Post-selection regression with constructed-instrument bias correction.",
    )
    parser.add_argument("--version", action="version", version=f"qivreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_selection_flags(p):
        p.add_argument("--lambda", dest="lam", default="empirical",
                       help="'empirical', 'theoretical' or a positive number (default: empirical)")
        p.add_argument("--tau", type=float, default=0.1, help="support threshold (default: 0.1)")
        p.add_argument("--sis", type=int, default=None, help="pre-screening size (default: off)")
        p.add_argument("--seed", type=int, default=0, help="seed for the empirical lambda draws")
        p.add_argument("--lambda-reps", type=int, default=5, help="draws behind the empirical lambda")

    p_select = sub.add_parser("select", help="run screening + selection, write the support")
    p_select.add_argument("--input", required=True, help="CSV with columns y,x1..xp")
    p_select.add_argument("--output-dir", required=True)
    add_selection_flags(p_select)
    p_select.set_defaults(func=cmd_select)

    p_fit = sub.add_parser("fit", help="full pipeline: selection, instrument, refit")
    p_fit.add_argument("--input", required=True, help="CSV with columns y,x1..xp")
    p_fit.add_argument("--output-dir", required=True)
    add_selection_flags(p_fit)
    p_fit.add_argument("--method", choices=("m1", "m2"), default="m1")
    p_fit.add_argument("--d", default="auto", help="'auto' or a positive integer (method m1)")
    p_fit.add_argument("--d-max", type=int, default=5)
    p_fit.add_argument("--bandwidth", default="gcv", help="'gcv' or a positive number")
    p_fit.add_argument("--c", type=float, default=2.0, help="rank-one fit constant (method m2)")
    p_fit.add_argument("--ck", type=float, default=0.2, help="ridge constant (method m2)")
    p_fit.add_argument("--rank-tol", type=float, default=None)
    p_fit.add_argument("--ci-level", type=float, default=0.95)
    p_fit.set_defaults(func=cmd_fit)

    p_pred = sub.add_parser("predict", help="apply a saved fit to new observations")
    p_pred.add_argument("--fit", required=True, help="fit.json from a fit run")
    p_pred.add_argument("--input", required=True, help="CSV with x1..xp (optionally leading y)")
    p_pred.add_argument("--output-dir", required=True)
    p_pred.set_defaults(func=cmd_predict)

    p_sim = sub.add_parser("simulate", help="run a seeded Monte Carlo experiment")
    p_sim.add_argument("--config", required=True, help="experiment config JSON")
    p_sim.add_argument("--output-dir", required=True)
    p_sim.add_argument("--reps", type=int, default=None, help="override config reps")
    p_sim.add_argument("--seed", type=int, default=None, help="override config seed")
    p_sim.add_argument("--threads", type=int, default=1,
                       help="worker processes (QIV_THREADS overrides)")
    p_sim.add_argument("--plot", action="store_true", help="also emit plot.svg")
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except QivregError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        print(f"error[LinAlgError]: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

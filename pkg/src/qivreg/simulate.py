"""Generative designs and the seeded Monte Carlo harness.

Designs draw rows from a Gaussian with an alternating-sign AR(1) covariance
(-rho)^|i-j| and a mean vector that is 0 on the significant support and 2
elsewhere. Each replication generates fresh training and test data, runs the
selection/instrument/refit pipeline per enabled method, and records squared
coefficient error against the true coefficients at the selected indices plus
test-set prediction errors for the three predictors.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, standardize
from .errors import (
    IncompatibleDimensions,
    NumericalError,
    QivregError,
    QivregWarning,
    ValidationError,
    ZeroSignal,
)
from .estimator import build_instrument, resolve_bandwidth, run_selection
from .plm import fit_plm
from .predict import (
    predict_adjusted,
    predict_ls,
    predict_working,
    prediction_error,
)

BETA_TYPES = {
    "I": (np.array([1.0, 0.4, 0.3, 0.5, 0.3, 0.3, 0.3]), (1, 2, 3, 4, 5, 6, 7)),
    "II": (np.array([1.0, 0.4, 0.3, 0.5, 0.3, 0.3, 0.3]), (1, 17, 33, 49, 65, 81, 97)),
    "III": (np.array([1.0, 0.4, -0.3, -0.5, 0.3, 0.3, -0.3]), (1, 2, 3, 4, 5, 6, 7)),
    "long": (
        np.array([1.0, -1.5, 2.0, 1.1, -3.0, 1.2, 1.8, -2.5, -2.0, 1.0]),
        (1, 2, 3, 4, 5, 6, 7, 8, 9, 10),
    ),
}

CHOLESKY_P_LIMIT = 2000
CSV_COLUMNS = ("estimator", "predictor", "mse", "std_mse", "pe", "std_pe", "reps_ok", "reps_failed")


@dataclass(frozen=True)
class BetaSpec:
    """Materialized true coefficient vector for one experiment."""

    type_id: str
    sparse: bool
    seed: int

    def __post_init__(self):
        if self.type_id not in BETA_TYPES:
            raise ValidationError(f"unknown beta type {self.type_id!r}; one of {sorted(BETA_TYPES)}")

    @property
    def significant_values(self):
        return BETA_TYPES[self.type_id][0]

    @property
    def i_true(self):
        return BETA_TYPES[self.type_id][1]


def gen_coefficients(spec: BetaSpec, p: int) -> np.ndarray:
    """Exact type values on the significant support; frozen censored-uniform
    draws (or zeros when sparse) elsewhere."""
    values, i_true = BETA_TYPES[spec.type_id]
    if p < max(i_true):
        raise IncompatibleDimensions(f"type {spec.type_id} needs p >= {max(i_true)}")
    beta = np.zeros(p)
    beta[np.asarray(i_true) - 1] = values
    if not spec.sparse:
        rng = np.random.default_rng(spec.seed)
        draw = rng.uniform(-0.5, 0.15, size=p - len(i_true))
        draw[draw < 0] = 0.0
        mask = np.ones(p, dtype=bool)
        mask[np.asarray(i_true) - 1] = False
        beta[mask] = draw
    return beta


def ar_covariance(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return (-rho) ** np.abs(idx[:, None] - idx[None, :])


def design_mean(p: int, i_true) -> np.ndarray:
    """0 on the significant support, 2 on the remaining coordinates."""
    mu = np.full(p, 2.0)
    mu[np.asarray(i_true) - 1] = 0.0
    return mu


def gen_design(n: int, p: int, rho: float, mu: np.ndarray, seed) -> np.ndarray:
    """n i.i.d. Gaussian rows with covariance (-rho)^|i-j| and mean mu.

    Uses a Cholesky factor up to p = 2000 and the exact O(np) first-order
    autoregression beyond that.
    """
    if not abs(rho) < 1:
        raise ValidationError("|rho| must be < 1")
    mu = np.asarray(mu, dtype=float)
    if mu.shape[0] != p:
        raise ValidationError("mu must have length p")
    rng = np.random.default_rng(seed)
    E = rng.standard_normal((n, p))
    if p <= CHOLESKY_P_LIMIT:
        L = np.linalg.cholesky(ar_covariance(p, rho) + 1e-12 * np.eye(p))
        return mu + E @ L.T
    X = np.empty((n, p))
    X[:, 0] = E[:, 0]
    scale = np.sqrt(1.0 - rho * rho)
    for j in range(1, p):
        X[:, j] = -rho * X[:, j - 1] + scale * E[:, j]
    return X + mu


def gen_response(X: np.ndarray, beta: np.ndarray, sigma: float, seed) -> np.ndarray:
    if sigma < 0:
        raise ValidationError("sigma must be nonnegative")
    X = np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float).ravel()
    if X.shape[1] != beta.shape[0]:
        raise IncompatibleDimensions("beta length does not match design columns")
    rng = np.random.default_rng(seed)
    return X @ beta + sigma * rng.standard_normal(X.shape[0])


def r_squared(beta: np.ndarray, Sigma: np.ndarray, sigma: float) -> float:
    """Population R^2 = signal variance / (signal variance + noise variance)."""
    signal = float(np.asarray(beta) @ np.asarray(Sigma) @ np.asarray(beta))
    return signal / (signal + sigma**2)


def sigma_for_r2(beta: np.ndarray, Sigma: np.ndarray, target_r2: float) -> float:
    """Noise level producing the requested population R^2."""
    if not 0 < target_r2 < 1:
        raise ValidationError("target R^2 must lie in (0, 1)")
    signal = float(np.asarray(beta) @ np.asarray(Sigma) @ np.asarray(beta))
    if signal <= 0:
        raise ZeroSignal("beta' Sigma beta is zero; no R^2 target is attainable")
    return float(np.sqrt(signal * (1.0 - target_r2) / target_r2))


@dataclass(frozen=True)
class ExperimentConfig:
    n: int
    p: int
    rho: float
    beta: BetaSpec
    reps: int
    seed: int
    sigma: float | None = None
    r2: float | None = None
    methods: tuple[str, ...] = ("m1", "m2", "ds_baseline", "ls_baseline")
    lambda_mode: object = "empirical"
    tau: float = 0.1
    d_mode: object = "auto"
    d_max: int = 5
    sis_keep: int | None = None
    test_size: int = 1000
    bandwidth: object = "gcv"
    ridge_c: float = 2.0
    ridge_ck: float = 0.2
    rank_tol: float | None = None
    lambda_realizations: int = 5
    mse_target: str = "selected_beta"

    def __post_init__(self):
        if self.reps < 1:
            raise ValidationError("reps must be >= 1")
        if (self.sigma is None) == (self.r2 is None):
            raise ValidationError("exactly one of sigma / r2 must be supplied")
        if self.test_size < 1:
            raise ValidationError("test_size must be >= 1")
        unknown = set(self.methods) - {"m1", "m2", "ds_baseline", "ls_baseline"}
        if unknown:
            raise ValidationError(f"unknown methods {sorted(unknown)}")
        if self.mse_target not in ("selected_beta", "significant_only"):
            raise ValidationError("mse_target must be 'selected_beta' or 'significant_only'")

    def resolve_sigma(self, beta_vec: np.ndarray) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        return sigma_for_r2(beta_vec, ar_covariance(self.p, self.rho), self.r2)

    def to_dict(self):
        return {
            "n": self.n,
            "p": self.p,
            "rho": self.rho,
            "beta": {"type_id": self.beta.type_id, "sparse": self.beta.sparse, "seed": self.beta.seed},
            "reps": self.reps,
            "seed": self.seed,
            "sigma": self.sigma,
            "r2": self.r2,
            "methods": list(self.methods),
            "lambda_mode": self.lambda_mode,
            "tau": self.tau,
            "d_mode": self.d_mode,
            "d_max": self.d_max,
            "sis_keep": self.sis_keep,
            "test_size": self.test_size,
            "bandwidth": self.bandwidth,
            "ridge_c": self.ridge_c,
            "ridge_ck": self.ridge_ck,
            "rank_tol": self.rank_tol,
            "lambda_realizations": self.lambda_realizations,
            "mse_target": self.mse_target,
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        beta = doc.pop("beta")
        return cls(
            beta=BetaSpec(type_id=beta["type_id"], sparse=bool(beta["sparse"]), seed=int(beta["seed"])),
            methods=tuple(doc.pop("methods", ("m1", "m2", "ds_baseline", "ls_baseline"))),
            **doc,
        )

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class MetricsRow:
    estimator: str
    predictor: str
    mse: float
    std_mse: float
    pe: float
    std_pe: float
    reps_ok: int
    reps_failed: int


@dataclass
class MetricsTable:
    rows: list
    config: ExperimentConfig
    seed: int
    reps: int
    i_hat_frequency: dict
    failures: list
    warnings: list = field(default_factory=list)
    replications: list = field(default_factory=list)

    def row(self, estimator, predictor) -> MetricsRow:
        for r in self.rows:
            if r.estimator == estimator and r.predictor == predictor:
                return r
        raise KeyError((estimator, predictor))

    def to_csv_text(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for r in self.rows:
            lines.append(
                ",".join([
                    r.estimator, r.predictor, repr(r.mse), repr(r.std_mse),
                    repr(r.pe), repr(r.std_pe), str(r.reps_ok), str(r.reps_failed),
                ])
            )
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.to_csv_text())

    def to_report(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "config_hash": self.config.digest(),
            "seed": self.seed,
            "reps": self.reps,
            "rows": [
                {
                    "estimator": r.estimator,
                    "predictor": r.predictor,
                    "mse": r.mse,
                    "std_mse": r.std_mse,
                    "pe": r.pe,
                    "std_pe": r.std_pe,
                    "reps_ok": r.reps_ok,
                    "reps_failed": r.reps_failed,
                }
                for r in self.rows
            ],
            "i_hat_frequency": {str(k): v for k, v in sorted(self.i_hat_frequency.items())},
            "failures": self.failures,
            "warnings": self.warnings,
            "replications": self.replications,
        }


def _rep_seeds(master_seed: int, rep: int, count: int):
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(rep,))
    return [int(child.generate_state(1)[0]) for child in ss.spawn(count)]


def _run_replication(config: ExperimentConfig, beta: np.ndarray, sigma: float, rep: int) -> dict:
    """One replication; returns per-method squared errors and prediction errors."""
    seeds = _rep_seeds(config.seed, rep, 4)
    mu = design_mean(config.p, config.beta.i_true)
    X = gen_design(config.n, config.p, config.rho, mu, seeds[0])
    y = gen_response(X, beta, sigma, seeds[1])
    X_test = gen_design(config.test_size, config.p, config.rho, mu, seeds[2])
    y_test = gen_response(X_test, beta, sigma, seeds[3])

    out = {"rep": rep, "warnings": []}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", QivregWarning)
        ds = standardize(Dataset.from_arrays(X, y))
        stage = run_selection(
            ds,
            lambda_mode=config.lambda_mode,
            tau=config.tau,
            sis_keep=config.sis_keep,
            lambda_realizations=config.lambda_realizations,
            lambda_seed=seeds[0] ^ 0x5EED,
            sigma=sigma,
        )
        part = stage.part
        zid = part.z_indices.zero_based()
        scales = ds.column_scales[zid]
        if config.mse_target == "selected_beta":
            target = beta[zid]
        else:
            in_true = np.isin(zid + 1, np.asarray(config.beta.i_true))
            target = np.where(in_true, beta[zid], 0.0)
        out["selected"] = [int(j) for j in part.z_indices]
        out["lambda_used"] = stage.lambda_used

        X_test_std = ds.transform_new(X_test)
        Z_test = X_test_std[:, zid]
        U_test = X_test_std[:, part.u_indices.zero_based()]

        if "ds_baseline" in config.methods:
            beta_ds = stage.result.beta_full.beta[zid] / scales
            out["ds_mse"] = float(np.sum((beta_ds - target) ** 2))
            y_plug = Z_test @ (stage.result.beta_full.beta[zid]) + ds.y_mean
            out["ds_pe"] = prediction_error(y_test, y_plug)

        if "ls_baseline" in config.methods:
            # the uncorrected working-model comparator: raw scale, no intercept
            theta_ls_raw = np.linalg.lstsq(X[:, zid], y, rcond=None)[0]
            out["ls_mse"] = float(np.sum((theta_ls_raw - target) ** 2))
            out["ls_pe"] = prediction_error(y_test, predict_ls(X[:, zid], y, X_test[:, zid]))

        for method in ("m1", "m2"):
            if method not in config.methods:
                continue
            plan, V = build_instrument(
                part,
                method=method,
                d=config.d_mode if method == "m1" else 1,
                d_max=config.d_max,
                rank_tol=config.rank_tol,
                ridge_c=config.ridge_c,
                ridge_ck=config.ridge_ck,
            )
            h, _ = resolve_bandwidth(config.bandwidth, part.Z, ds.y, V)
            plm = fit_plm(part.Z, ds.y, V, h, plan.Q12)
            theta_orig = plm.theta_hat / scales
            out[f"{method}_mse"] = float(np.sum((theta_orig - target) ** 2))
            y_adj, _ = predict_adjusted(plm, plan, Z_test, U_test)
            out[f"{method}_pe_adjusted"] = prediction_error(y_test, y_adj + ds.y_mean)
            out[f"{method}_pe_working"] = prediction_error(
                y_test, predict_working(plm, Z_test) + ds.y_mean
            )
        out["warnings"] = [str(w.message) for w in caught if issubclass(w.category, QivregWarning)]
    return out


def _replication_worker(args):
    config_doc, beta, sigma, rep = args
    config = ExperimentConfig.from_dict(config_doc)
    try:
        return _run_replication(config, np.asarray(beta), sigma, rep)
    except (QivregError, np.linalg.LinAlgError) as exc:
        return {"rep": rep, "error": f"{type(exc).__name__}: {exc}"}


def run_experiment(config: ExperimentConfig, threads: int = 1) -> MetricsTable:
    """Execute all replications and aggregate the metrics grid.

    Failed replications are recorded and excluded; the run aborts when more
    than 20% fail. Results are deterministic in (config, seed) and do not
    depend on the thread count.
    """
    beta = gen_coefficients(config.beta, config.p)
    sigma = config.resolve_sigma(beta)
    tasks = [(config.to_dict(), beta.tolist(), sigma, rep) for rep in range(config.reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replication_worker, tasks))
    else:
        results = [_replication_worker(t) for t in tasks]
    results.sort(key=lambda r: r["rep"])

    ok = [r for r in results if "error" not in r]
    failures = [{"rep": r["rep"], "error": r["error"]} for r in results if "error" in r]
    if len(failures) > 0.2 * config.reps:
        raise NumericalError(
            f"{len(failures)} of {config.reps} replications failed; aborting "
            f"(first: {failures[0]['error']})"
        )

    freq: dict = {}
    warnings_log = []
    for r in ok:
        for j in r.get("selected", []):
            freq[j] = freq.get(j, 0) + 1
        for w in r.get("warnings", []):
            warnings_log.append(f"rep {r['rep']}: {w}")

    def aggregate(mse_key, pe_key):
        mses = np.array([r[mse_key] for r in ok])
        pes = np.array([r[pe_key] for r in ok])
        return MetricsRow(
            estimator="",
            predictor="",
            mse=float(np.mean(mses)),
            std_mse=float(np.std(mses, ddof=1)) if len(mses) > 1 else 0.0,
            pe=float(np.mean(pes)),
            std_pe=float(np.std(pes, ddof=1)) if len(pes) > 1 else 0.0,
            reps_ok=len(ok),
            reps_failed=len(failures),
        )

    rows = []
    if not ok:
        raise NumericalError("all replications failed")
    for method, label in (("m1", "method1"), ("m2", "method2")):
        if method in config.methods:
            for predictor in ("adjusted", "working"):
                row = aggregate(f"{method}_mse", f"{method}_pe_{predictor}")
                row.estimator = label
                row.predictor = predictor
                rows.append(row)
    if "ds_baseline" in config.methods:
        row = aggregate("ds_mse", "ds_pe")
        row.estimator = "dantzig"
        row.predictor = "plugin"
        rows.append(row)
    if "ls_baseline" in config.methods:
        row = aggregate("ls_mse", "ls_pe")
        row.estimator = "least_squares"
        row.predictor = "linear"
        rows.append(row)

    return MetricsTable(
        rows=rows,
        config=config,
        seed=config.seed,
        reps=config.reps,
        i_hat_frequency=freq,
        failures=failures,
        warnings=warnings_log,
        replications=ok,
    )


def resolve_threads(threads: int | None) -> int:
    env = os.environ.get("QIV_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ValidationError(f"QIV_THREADS must be an integer, got {env!r}") from exc
    return max(1, threads or 1)

"""Pipeline assembly and the scikit-learn style estimator facade.

`run_selection` wires screening, the L1 selector and thresholding into a
`SelectionResult`; `QuasiIVRegressor` composes the whole chain
(standardize -> select -> instrument -> partially linear refit) behind
fit/predict so it can slot into sklearn tooling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_X_y

from .data import CoefficientVector, Dataset, IndexSet, Partition, partition, standardize
from .errors import QivregWarning, ValidationError
from .instrument import (
    build_instrument_m1,
    build_instrument_m2,
    select_d,
)
from .plm import (
    confidence_intervals,
    default_bandwidth_grid,
    fit_plm,
    gcv_bandwidth,
)
from .predict import ls_coefficients, predict_adjusted, predict_working
from .selector import (
    DEFAULT_LP_TOL,
    SelectionResult,
    dantzig_select,
    default_lambda,
    estimate_sigma,
    sis_screen,
    theoretical_lambda,
    threshold_select,
)

DEFAULT_D_MAX = 5
DEFAULT_LAMBDA_REALIZATIONS = 5


@dataclass
class SelectionStage:
    """Resolved selection step: estimate, support, and the tuning actually used."""

    result: SelectionResult
    part: Partition
    lambda_used: float
    sigma_used: float | None
    warnings: list = field(default_factory=list)


def resolve_lambda(lambda_mode, X_sel, n, *, sigma=None, n_realizations=DEFAULT_LAMBDA_REALIZATIONS, seed=0):
    """Turn a lambda specification into a constraint level for the selector.

    ``empirical`` uses the simulated max |X'z| directly (it already lives on
    the constraint scale); ``theoretical`` converts the rate formula to that
    scale by multiplying with n and needs a noise level sigma; a numeric
    value is used as-is.
    """
    p_sel = X_sel.shape[1]
    if isinstance(lambda_mode, (int, float)) and not isinstance(lambda_mode, bool):
        return float(lambda_mode)
    if lambda_mode == "empirical":
        return default_lambda(X_sel, n_realizations=n_realizations, seed=seed)
    if lambda_mode == "theoretical":
        if sigma is None:
            raise ValidationError("theoretical lambda needs sigma")
        return theoretical_lambda(float(sigma), n, p_sel) * n
    raise ValidationError(f"unknown lambda mode {lambda_mode!r}")


def run_selection(
    ds: Dataset,
    *,
    lambda_mode="empirical",
    tau=0.1,
    sis_keep=None,
    lp_tolerance=DEFAULT_LP_TOL,
    lambda_realizations=DEFAULT_LAMBDA_REALIZATIONS,
    lambda_seed=0,
    sigma=None,
    beta_init=None,
) -> SelectionStage:
    """Screen (optionally), solve the selector, threshold, and partition.

    `ds` must be standardized. An empty thresholded support falls back to the
    single largest-coefficient index with a warning record. `beta_init` plugs
    in a full-model coefficient estimate from any external selector, skipping
    the built-in one.
    """
    if not ds.standardized:
        raise ValidationError("run_selection requires a standardized dataset")
    notes = []
    X, y = ds.X, ds.y
    n, p = X.shape
    screened = None
    X_sel = X
    if sis_keep is not None and sis_keep < p:
        screened = sis_screen(X, y, int(sis_keep))
        X_sel = X[:, screened.zero_based()]
    sigma_used = sigma
    if beta_init is not None:
        beta_full = np.asarray(
            beta_init.beta if isinstance(beta_init, CoefficientVector) else beta_init,
            dtype=float,
        ).ravel()
        if beta_full.shape[0] != p:
            raise ValidationError(f"beta_init must have length p={p}")
        if screened is not None:
            keep = np.zeros(p, dtype=bool)
            keep[screened.zero_based()] = True
            beta_full = np.where(keep, beta_full, 0.0)
        lam = 0.0
    else:
        if lambda_mode == "theoretical" and sigma_used is None:
            sigma_used = estimate_sigma(X, y)
        lam = resolve_lambda(
            lambda_mode,
            X_sel,
            n,
            sigma=sigma_used,
            n_realizations=lambda_realizations,
            seed=lambda_seed,
        )
        beta_sel = dantzig_select(X_sel, y, lam, lp_tolerance)
        beta_full = np.zeros(p)
        if screened is not None:
            beta_full[screened.zero_based()] = beta_sel
        else:
            beta_full = beta_sel
    selected = threshold_select(beta_full, tau)
    if len(selected) == 0:
        j = int(np.argmax(np.abs(beta_full))) + 1
        selected = IndexSet((j,))
        notes.append(f"empty thresholded support; fell back to largest coefficient x{j}")
        warnings.warn(notes[-1], QivregWarning)
    if len(selected) >= min(n, p):
        raise ValidationError(
            f"selected {len(selected)} predictors; need fewer than min(n, p) = {min(n, p)}"
        )
    part = partition(ds, selected)
    result = SelectionResult(
        beta_full=CoefficientVector(beta_full),
        selected=selected,
        lambda_used=float(lam),
        screened_indices=screened,
    )
    return SelectionStage(
        result=result,
        part=part,
        lambda_used=float(lam),
        sigma_used=None if sigma_used is None else float(sigma_used),
        warnings=notes,
    )


def build_instrument(part: Partition, *, method="m1", d="auto", d_max=DEFAULT_D_MAX,
                     rank_tol=None, ridge_c=2.0, ridge_ck=0.2):
    """Instrument stage shared by the estimator, the CLI and the simulator."""
    Z, U = part.Z, part.U
    if method == "m1":
        if d == "auto":
            d_used = select_d(Z, U, d_max=min(d_max, U.shape[1]), rank_tol=rank_tol)
        else:
            d_used = int(d)
        plan, V = build_instrument_m1(Z, U, d_used, rank_tol=rank_tol)
    elif method == "m2":
        plan, V = build_instrument_m2(Z, U, c=ridge_c, c_k=ridge_ck, rank_tol=rank_tol)
    else:
        raise ValidationError(f"unknown method {method!r}; expected 'm1' or 'm2'")
    return plan, V


def resolve_bandwidth(bandwidth, Z, y, V):
    if isinstance(bandwidth, (int, float)) and not isinstance(bandwidth, bool):
        if bandwidth <= 0:
            raise ValidationError("fixed bandwidth must be positive")
        return float(bandwidth), False
    if bandwidth == "gcv":
        return gcv_bandwidth(Z, y, V, default_bandwidth_grid(V)), True
    raise ValidationError(f"unknown bandwidth spec {bandwidth!r}")


class QuasiIVRegressor(BaseEstimator, RegressorMixin):
    """Post-selection linear regression with constructed-instrument bias correction.

    Fits in four stages: standardize columns (and center the response),
    select a working support with the L1/L-infinity selector, build an
    instrument column V from the removed predictors, then refit the kept
    coefficients in a partially linear model that residualizes on V.

    Parameters
    ----------
    method : {'m1', 'm2'}
        Instrument construction: 'm1' whitens the top-d correlated removed
        columns and keeps the leading eigen-directions; 'm2' always builds a
        scalar instrument through a ridge-regularized rank-one fit.
    lambda_mode : {'empirical', 'theoretical'} or float
        Selector constraint level. 'empirical' simulates max |X'z| over
        Gaussian draws; 'theoretical' uses the rate formula times n, with the
        noise scale estimated from screening residuals when not supplied to
        ``fit``; a float is taken verbatim.
    tau : float
        Support threshold on the selector coefficients.
    sis_keep : int or None
        Marginal-correlation pre-screening size (None disables screening).
    d : 'auto' or int
        Number of removed columns folded into the instrument (method 1);
        'auto' grows d until the cross-Gram rank is within 1 of d.
    d_max : int
        Cap for the automatic d search.
    bandwidth : 'gcv' or float
        Kernel bandwidth for the partially linear refit.
    ridge_c, ridge_ck : float
        Rank-one fit constants for method 2.
    rank_tol : float or None
        Relative eigenvalue cutoff for the retained instrument rank; None
        floors the 1% default at the estimate's O(n^{-1/2}) noise scale.
    lp_tolerance : float
        Feasibility/optimality tolerance for the selector linear program.
    lambda_realizations : int
        Number of z draws behind the empirical lambda.
    ci_level : float
        Confidence level for the reported intervals.
    random_state : int
        Seed for the empirical lambda draws.

    Attributes
    ----------
    theta_ : ndarray, original-scale coefficients of the selected predictors.
    selected_ : tuple of 1-based selected column indices.
    coef_ : ndarray of length p, theta_ scattered over the full column set.
    plan_, plm_ : fitted instrument plan and partially linear fit.
    ci_ : (q, 2) original-scale confidence intervals at ``ci_level``.
    """

    def __init__(
        self,
        method="m1",
        lambda_mode="empirical",
        tau=0.1,
        sis_keep=None,
        d="auto",
        d_max=DEFAULT_D_MAX,
        bandwidth="gcv",
        ridge_c=2.0,
        ridge_ck=0.2,
        rank_tol=None,
        lp_tolerance=DEFAULT_LP_TOL,
        lambda_realizations=DEFAULT_LAMBDA_REALIZATIONS,
        ci_level=0.95,
        random_state=0,
    ):
        self.method = method
        self.lambda_mode = lambda_mode
        self.tau = tau
        self.sis_keep = sis_keep
        self.d = d
        self.d_max = d_max
        self.bandwidth = bandwidth
        self.ridge_c = ridge_c
        self.ridge_ck = ridge_ck
        self.rank_tol = rank_tol
        self.lp_tolerance = lp_tolerance
        self.lambda_realizations = lambda_realizations
        self.ci_level = ci_level
        self.random_state = random_state

    def fit(self, X, y, sigma=None):
        """Fit the full pipeline on raw (unstandardized) data.

        `sigma` optionally supplies a known noise standard deviation for the
        theoretical lambda rule; otherwise that rule estimates it from
        screening residuals.
        """
        X, y = check_X_y(X, y, y_numeric=True)
        ds = standardize(Dataset.from_arrays(X, y))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", QivregWarning)
            stage = run_selection(
                ds,
                lambda_mode=self.lambda_mode,
                tau=self.tau,
                sis_keep=self.sis_keep,
                lp_tolerance=self.lp_tolerance,
                lambda_realizations=self.lambda_realizations,
                lambda_seed=self.random_state,
                sigma=sigma,
            )
            plan, V = build_instrument(
                stage.part,
                method=self.method,
                d=self.d,
                d_max=self.d_max,
                rank_tol=self.rank_tol,
                ridge_c=self.ridge_c,
                ridge_ck=self.ridge_ck,
            )
            h, gcv_used = resolve_bandwidth(self.bandwidth, stage.part.Z, ds.y, V)
            plm = fit_plm(stage.part.Z, ds.y, V, h, plan.Q12)
        self.dataset_ = ds
        self.selection_ = stage.result
        self.lambda_used_ = stage.lambda_used
        self.sigma_hat_ = stage.sigma_used
        self.z_indices_ = stage.part.z_indices
        self.u_indices_ = stage.part.u_indices
        self.selected_ = tuple(stage.part.z_indices)
        self.plan_ = plan
        self.plm_ = plm
        self.h_ = h
        self.gcv_used_ = gcv_used
        scales = ds.column_scales[stage.part.z_indices.zero_based()]
        self.theta_std_ = plm.theta_hat.copy()
        self.theta_ = plm.theta_hat / scales
        self.coef_ = np.zeros(ds.p)
        self.coef_[stage.part.z_indices.zero_based()] = self.theta_
        self.ci_ = confidence_intervals(plm, self.ci_level) / scales[:, None]
        self.ls_coef_ = ls_coefficients(X[:, stage.part.z_indices.zero_based()], y)
        self.y_mean_ = ds.y_mean
        self.n_features_in_ = ds.p
        self.warnings_ = list(stage.warnings) + [
            str(w.message) for w in caught if issubclass(w.category, QivregWarning)
        ]
        return self

    def _check_fitted(self):
        if not hasattr(self, "plm_"):
            raise NotFittedError("this QuasiIVRegressor instance is not fitted yet")

    def predict(self, X, mode="adjusted"):
        """Predict on raw observations.

        ``adjusted`` uses the kept block plus the instrument correction
        (needs all columns); ``working`` uses the kept block only.
        """
        self._check_fitted()
        X = check_array(X)
        X_std = self.dataset_.transform_new(X)
        Z_new = X_std[:, self.z_indices_.zero_based()]
        if mode == "working":
            return predict_working(self.plm_, Z_new) + self.y_mean_
        if mode == "adjusted":
            U_new = X_std[:, self.u_indices_.zero_based()]
            y_hat, _ = predict_adjusted(self.plm_, self.plan_, Z_new, U_new)
            return y_hat + self.y_mean_
        raise ValidationError(f"unknown prediction mode {mode!r}")

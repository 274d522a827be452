"""The three post-fit predictors and empirical prediction error.

* adjusted: linear part plus the fitted nonparametric correction evaluated at
  the new observation's instrument value (needs the removed-block columns);
* working: linear part plus the average correction (uses the kept block only);
* least squares: plain working-model regression, the uncorrected baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, SingularDesign, ValidationError
from .instrument import InstrumentPlan
from .plm import EPS_PD, PLMFit


@dataclass(frozen=True)
class PredictionBundle:
    y_adjusted: np.ndarray
    y_working: np.ndarray
    y_ls: np.ndarray
    pe_adjusted: float
    pe_working: float
    pe_ls: float


def bundle_predictions(y_true, y_adjusted, y_working, y_ls) -> PredictionBundle:
    """Collect the three predictions with their empirical prediction errors."""
    return PredictionBundle(
        y_adjusted=np.asarray(y_adjusted, dtype=float),
        y_working=np.asarray(y_working, dtype=float),
        y_ls=np.asarray(y_ls, dtype=float),
        pe_adjusted=prediction_error(y_true, y_adjusted),
        pe_working=prediction_error(y_true, y_working),
        pe_ls=prediction_error(y_true, y_ls),
    )


def predict_adjusted(fit: PLMFit, plan: InstrumentPlan, Z_new: np.ndarray, U_new: np.ndarray):
    """Bias-corrected prediction theta' Z + g(V) on the training standardized scale.

    Returns ``(predictions, degenerate_count)``; the count tracks evaluation
    points whose kernel mass underflowed (far extrapolation).
    """
    Z_new = np.atleast_2d(np.asarray(Z_new, dtype=float))
    if Z_new.shape[1] != fit.q:
        raise ValidationError(f"Z_new has {Z_new.shape[1]} columns, expected {fit.q}")
    V_new = plan.apply(Z_new, U_new)
    g_vals, bad = fit.g_at(V_new)
    return Z_new @ fit.theta_hat + g_vals, bad


def predict_working(fit: PLMFit, Z_new: np.ndarray) -> np.ndarray:
    """Kept-block-only prediction theta' Z + mean fitted correction."""
    Z_new = np.atleast_2d(np.asarray(Z_new, dtype=float))
    if Z_new.shape[1] != fit.q:
        raise ValidationError(f"Z_new has {Z_new.shape[1]} columns, expected {fit.q}")
    return Z_new @ fit.theta_hat + fit.g_bar


def ls_coefficients(Z_train: np.ndarray, Y_train: np.ndarray) -> np.ndarray:
    """Ordinary least squares on the working model, no intercept."""
    Z_train = np.atleast_2d(np.asarray(Z_train, dtype=float))
    Y_train = np.asarray(Y_train, dtype=float).ravel()
    n = Z_train.shape[0]
    gram = Z_train.T @ Z_train / n
    min_eig = float(np.linalg.eigvalsh((gram + gram.T) / 2.0)[0])
    if min_eig <= EPS_PD:
        raise SingularDesign(f"Z'Z is numerically singular (min eigenvalue {min_eig:.3e})")
    return np.linalg.solve(gram, Z_train.T @ Y_train / n)


def predict_ls(Z_train: np.ndarray, Y_train: np.ndarray, Z_new: np.ndarray) -> np.ndarray:
    """Working-model least-squares prediction on whatever scale the inputs carry."""
    theta_s = ls_coefficients(Z_train, Y_train)
    Z_new = np.atleast_2d(np.asarray(Z_new, dtype=float))
    if Z_new.shape[1] != theta_s.shape[0]:
        raise ValidationError("Z_new column count does not match the training block")
    return Z_new @ theta_s


def prediction_error(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Mean squared deviation between truth and prediction."""
    y_true = np.asarray(y_true, dtype=float).ravel()
    y_pred = np.asarray(y_pred, dtype=float).ravel()
    if y_true.shape[0] != y_pred.shape[0] or y_true.shape[0] == 0:
        raise LengthMismatch(
            f"lengths differ or empty: {y_true.shape[0]} vs {y_pred.shape[0]}"
        )
    return float(np.mean((y_true - y_pred) ** 2))

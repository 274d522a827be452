"""Partially linear estimation of the bias-corrected working model.

The response and the kept block are residualized by a leave-in
Nadaraya-Watson smoother on the instrument values V (Gaussian product
kernel, one common bandwidth); the linear coefficients come from the
residual normal equations. Bandwidths are picked by generalized
cross-validation on a geometric grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import (
    AllBandwidthsDegenerate,
    SingularResidualGram,
    ValidationError,
)

EPS_PD = 1e-8
DEGENERATE_SUM = 1e-300
_GAUSS_NORM = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian product kernel: bandwidth h shared across the r coordinates."""

    h: float
    r: int

    def __post_init__(self):
        if not self.h > 0:
            raise ValidationError("bandwidth must be positive")
        if self.r < 1:
            raise ValidationError("kernel dimension must be >= 1")


def nw_weight_matrix(V_eval: np.ndarray, V_train: np.ndarray, h: float):
    """Row-normalized kernel weights of each eval point against the sample.

    Returns ``(W, degenerate)`` where W[i, k] is the weight of training row k
    at eval row i and `degenerate` counts eval rows whose kernel mass
    underflowed (those rows fall back to uniform weights). Rows are computed
    identically whether or not the eval point is a training point, so
    in-sample and out-of-sample evaluations agree bit for bit.
    """
    if h <= 0:
        raise ValidationError("bandwidth must be positive")
    V_eval = np.atleast_2d(np.asarray(V_eval, dtype=float))
    V_train = np.atleast_2d(np.asarray(V_train, dtype=float))
    r = V_train.shape[1]
    if V_eval.shape[1] != r:
        raise ValidationError(f"eval points have {V_eval.shape[1]} coordinates, expected {r}")
    diff = (V_eval[:, None, :] - V_train[None, :, :]) / h
    kern = np.exp(-0.5 * np.einsum("ikr,ikr->ik", diff, diff))
    kern *= (_GAUSS_NORM / h) ** r
    total = kern.sum(axis=1)
    bad = total < DEGENERATE_SUM
    n_train = V_train.shape[0]
    if np.any(bad):
        kern[bad] = 1.0 / n_train
        total = kern.sum(axis=1)
    return kern / total[:, None], int(np.count_nonzero(bad))


def nw_weights(v: np.ndarray, V_train: np.ndarray, h: float) -> np.ndarray:
    """Kernel weights of a single evaluation point; they sum to one."""
    W, _ = nw_weight_matrix(np.atleast_2d(np.asarray(v, dtype=float).ravel()), V_train, h)
    return W[0]


def nw_smooth(values: np.ndarray, V_train: np.ndarray, h: float) -> np.ndarray:
    """Leave-in kernel regression of `values` on V, evaluated at each sample point."""
    values = np.asarray(values, dtype=float)
    W, _ = nw_weight_matrix(V_train, V_train, h)
    return W @ values


@dataclass(frozen=True)
class PLMFit:
    """Fitted partially linear model on the standardized training scale."""

    theta_hat: np.ndarray
    h: float
    V_train: np.ndarray
    g_residual_table: np.ndarray
    sigma_v_sq: float
    asym_cov: np.ndarray
    g_bar: float
    kernel: KernelSpec
    degenerate_weights: int = 0

    def __post_init__(self):
        if self.sigma_v_sq < 0:
            raise ValidationError("sigma_v_sq must be nonnegative")
        cov = np.asarray(self.asym_cov, dtype=float)
        if np.max(np.abs(cov - cov.T)) > 1e-10 * max(1.0, float(np.max(np.abs(cov)))):
            raise ValidationError("asym_cov must be symmetric")
        if float(np.linalg.eigvalsh((cov + cov.T) / 2.0)[0]) < -1e-12:
            raise ValidationError("asym_cov must be positive semidefinite")

    @property
    def q(self):
        return self.theta_hat.shape[0]

    def g_at(self, V_new: np.ndarray):
        """Evaluate the fitted nonparametric component at new instrument values."""
        W, bad = nw_weight_matrix(V_new, self.V_train, self.h)
        return W @ self.g_residual_table, bad

    def to_dict(self):
        return {
            "theta_hat": np.asarray(self.theta_hat).tolist(),
            "h": float(self.h),
            "V_train": np.asarray(self.V_train).tolist(),
            "g_residual_table": np.asarray(self.g_residual_table).tolist(),
            "sigma_v_sq": float(self.sigma_v_sq),
            "asym_cov": np.asarray(self.asym_cov).tolist(),
            "g_bar": float(self.g_bar),
            "kernel": {"h": self.kernel.h, "r": self.kernel.r},
            "degenerate_weights": int(self.degenerate_weights),
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, doc):
        return cls(
            theta_hat=np.asarray(doc["theta_hat"], dtype=float),
            h=float(doc["h"]),
            V_train=np.atleast_2d(np.asarray(doc["V_train"], dtype=float)),
            g_residual_table=np.asarray(doc["g_residual_table"], dtype=float),
            sigma_v_sq=float(doc["sigma_v_sq"]),
            asym_cov=np.asarray(doc["asym_cov"], dtype=float),
            g_bar=float(doc["g_bar"]),
            kernel=KernelSpec(h=float(doc["kernel"]["h"]), r=int(doc["kernel"]["r"])),
            degenerate_weights=int(doc.get("degenerate_weights", 0)),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _residualize(Z, Y, W):
    Y_hat = Y - W @ Y
    Z_hat = Z - W @ Z
    return Z_hat, Y_hat


def _plug_in_covariance(sigma_v_sq, S_n, Q12, n, q):
    """The plug-in sigma_V^2 (Q12' Q12)^{-1} / n when that Gram is q-square
    and invertible, else sigma_V^2 S_n^{-1} / n (same limit)."""
    if Q12 is not None:
        Q12 = np.atleast_2d(np.asarray(Q12, dtype=float))
        gram = Q12.T @ Q12
        if gram.shape[0] == q:
            gram_min = float(np.linalg.eigvalsh((gram + gram.T) / 2.0)[0])
            if gram_min > EPS_PD:
                cov = sigma_v_sq * np.linalg.inv(gram) / n
                return (cov + cov.T) / 2.0
    cov = sigma_v_sq * np.linalg.inv(S_n) / n
    return (cov + cov.T) / 2.0


def _fit_plm_core(Z, Y, V, h, Q12, obs_weights=None) -> PLMFit:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if V.shape[0] != Z.shape[0] or Y.shape[0] != Z.shape[0]:
        raise ValidationError("Z, Y and V must agree on the number of rows")
    n, q = Z.shape
    W, bad = nw_weight_matrix(V, V, h)
    Z_hat, Y_hat = _residualize(Z, Y, W)
    Zw = Z_hat if obs_weights is None else Z_hat * obs_weights[:, None]
    S_n = (Zw.T @ Z_hat) / n
    S_n = (S_n + S_n.T) / 2.0
    min_eig = float(np.linalg.eigvalsh(S_n)[0])
    if min_eig <= EPS_PD:
        raise SingularResidualGram(
            f"kept block is numerically explained by V (min eigenvalue {min_eig:.3e})"
        )
    theta = np.linalg.solve(S_n, (Zw.T @ Y_hat) / n)
    xi = Y_hat - Z_hat @ theta
    sigma_v_sq = float(np.mean(xi**2))
    g_table = Y - Z @ theta
    g_train = W @ g_table
    return PLMFit(
        theta_hat=theta,
        h=float(h),
        V_train=V,
        g_residual_table=g_table,
        sigma_v_sq=sigma_v_sq,
        asym_cov=_plug_in_covariance(sigma_v_sq, S_n, Q12, n, q),
        g_bar=float(np.mean(g_train)),
        kernel=KernelSpec(h=float(h), r=V.shape[1]),
        degenerate_weights=bad,
    )


def fit_plm(Z: np.ndarray, Y: np.ndarray, V: np.ndarray, h: float, Q12: np.ndarray | None = None) -> PLMFit:
    """Estimate the linear coefficients after kernel residualization on V.

    The response and kept block are residualized by the leave-in smoother on
    V; theta solves the residual normal equations. The asymptotic covariance
    uses the plug-in form when Q12 is supplied with a q-square invertible
    Gram, and the residualized-Gram form otherwise.
    """
    return _fit_plm_core(Z, Y, V, h, Q12)


def fit_plm_weighted(
    Z: np.ndarray,
    Y: np.ndarray,
    V: np.ndarray,
    h: float,
    Q12: np.ndarray | None,
    variances: np.ndarray,
) -> PLMFit:
    """Heteroscedastic variant: inverse-variance weights in the normal equations.

    Weights are normalized to mean one, so any common variance reproduces the
    unweighted fit exactly. Smoothing itself stays unweighted.
    """
    variances = np.asarray(variances, dtype=float).ravel()
    if variances.shape[0] != np.atleast_2d(np.asarray(Z)).shape[0]:
        raise ValidationError("variances must have one entry per observation")
    if np.any(variances <= 0):
        raise ValidationError("variances must be strictly positive")
    w = 1.0 / variances
    return _fit_plm_core(Z, Y, V, h, Q12, obs_weights=w / w.mean())


def default_bandwidth_grid(V: np.ndarray, n_points: int = 20) -> np.ndarray:
    """Geometric grid around the rule-of-thumb rate s_V * n^(-1/(4+r))."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    n, r = V.shape
    s_v = float(np.mean(V.std(axis=0)))
    if s_v == 0.0:
        s_v = 1.0
    center = s_v * n ** (-1.0 / (4 + r))
    return np.geomspace(0.2 * center, 3.0 * center, n_points)


def gcv_bandwidth(Z: np.ndarray, Y: np.ndarray, V: np.ndarray, grid) -> float:
    """Grid bandwidth minimizing n RSS(h) / (n - tr(S_h))^2; ties take the smaller h.

    RSS is the residual sum of squares of the partially linear fit at h and
    S_h the leave-in smoother matrix on V. Grid points with tr(S_h) >= n are
    skipped; if none survive, AllBandwidthsDegenerate is raised.
    """
    grid = np.asarray(list(grid), dtype=float)
    if grid.size == 0:
        raise ValidationError("bandwidth grid must be nonempty")
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    V = np.atleast_2d(np.asarray(V, dtype=float))
    n = Z.shape[0]
    best_h = None
    best_score = np.inf
    for h in np.sort(grid):
        W, _ = nw_weight_matrix(V, V, float(h))
        trace = float(np.trace(W))
        # degeneracy guards: a self-weight that rounds to 1 means the smoother
        # interpolates that row exactly, and a trace beyond n/2 leaves too few
        # residual degrees of freedom for the linear coefficients; either way
        # the criterion stops measuring fit against complexity
        if trace >= 0.5 * n or float(np.max(np.diag(W))) >= 1.0 - 1e-10:
            continue
        Z_hat, Y_hat = _residualize(Z, Y, W)
        S_n = (Z_hat.T @ Z_hat) / n
        min_eig = float(np.linalg.eigvalsh((S_n + S_n.T) / 2.0)[0])
        if min_eig <= EPS_PD:
            continue
        theta = np.linalg.solve(S_n, (Z_hat.T @ Y_hat) / n)
        rss = float(np.sum((Y_hat - Z_hat @ theta) ** 2))
        score = n * rss / (n - trace) ** 2
        if score < best_score:  # strict: ties keep the earlier (smaller) h
            best_score = score
            best_h = float(h)
    if best_h is None:
        raise AllBandwidthsDegenerate("every grid bandwidth left no smoother degrees of freedom")
    return best_h


def confidence_intervals(fit: PLMFit, level: float) -> np.ndarray:
    """Normal-approximation intervals, one (lo, hi) row per linear coefficient."""
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    z = norm.ppf(0.5 + level / 2.0)
    half = z * np.sqrt(np.diag(fit.asym_cov))
    return np.column_stack([fit.theta_hat - half, fit.theta_hat + half])

"""Initial working-model construction.

Marginal-correlation pre-screening, the L1-minimizing selector with an
L-infinity residual-correlation constraint, tuning-parameter rules, and
threshold support recovery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .data import CoefficientVector, IndexSet, zero_scale_columns
from .errors import SolverDidNotConverge, ValidationError, ZeroVarianceColumn

DEFAULT_LP_TOL = 1e-8


@dataclass(frozen=True)
class SelectorConfig:
    """Tuning knobs for the selection stage."""

    lam: float
    tau: float
    lp_tolerance: float = DEFAULT_LP_TOL
    sis_keep: int | None = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError("lam must be positive")
        if self.tau < 0:
            raise ValidationError("tau must be nonnegative")
        if not 0 < self.lp_tolerance <= 1e-3:
            raise ValidationError("lp_tolerance must lie in (0, 1e-3]")
        if self.sis_keep is not None and self.sis_keep < 1:
            raise ValidationError("sis_keep must be a positive integer")


@dataclass(frozen=True)
class SelectionResult:
    """Full-model coefficient estimate plus the recovered support."""

    beta_full: CoefficientVector
    selected: IndexSet
    lambda_used: float
    screened_indices: IndexSet | None = None


def dantzig_select(X: np.ndarray, y: np.ndarray, lam: float, tol: float = DEFAULT_LP_TOL) -> np.ndarray:
    """Minimize ||beta||_1 subject to ||X.T (y - X beta)||_inf <= lam.

    `lam` is on the same scale as ``X.T @ z`` for a unit-variance noise vector
    z, which is what `default_lambda` produces; `theoretical_lambda` values
    must be multiplied by n before use here (the CLI and the pipeline do this
    internally).

    Solved as a linear program over the split beta = b+ - b-: minimize
    sum(b+ + b-) under the 2p residual-correlation inequalities. The returned
    vector is checked against the constraint; a violation beyond `tol` raises
    ``SolverDidNotConverge``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    if lam < 0:
        raise ValidationError("lam must be nonnegative")
    G = X.T @ X
    b = X.T @ y
    if np.max(np.abs(b)) <= lam:
        return np.zeros(p)  # zero is feasible and has minimal L1 norm
    c = np.ones(2 * p)
    A_ub = np.block([[-G, G], [G, -G]])
    b_ub = np.concatenate([lam - b, lam + b])
    res = linprog(
        c,
        A_ub=A_ub,
        b_ub=b_ub,
        bounds=(0, None),
        method="highs",
        options={
            "primal_feasibility_tolerance": min(tol, 1e-8),
            "dual_feasibility_tolerance": min(tol, 1e-8),
        },
    )
    if not res.success:
        raise SolverDidNotConverge(res.nit, f"LP failed: {res.message}")
    beta = res.x[:p] - res.x[p:]
    # feasibility certificate, asserted on every call
    violation = np.max(np.abs(X.T @ (y - X @ beta))) - lam
    if violation > tol * (1.0 + abs(lam)):
        raise SolverDidNotConverge(res.nit, f"constraint violated by {violation:.3e}")
    return beta


def default_lambda(X: np.ndarray, n_realizations: int = 5, seed: int = 0) -> float:
    """Empirical constraint level: max of |X.T z| over z ~ N(0, I_n) draws."""
    X = np.asarray(X, dtype=float)
    if n_realizations < 1:
        raise ValidationError("n_realizations must be >= 1")
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    best = 0.0
    for _ in range(n_realizations):
        z = rng.standard_normal(n)
        best = max(best, float(np.max(np.abs(X.T @ z))))
    return best


def theoretical_lambda(sigma: float, n: int, p: int) -> float:
    """Rate-driven tuning value 2 sigma sqrt(log p / n).

    This lives on the per-observation correlation scale; multiply by n to get
    the constraint level used by `dantzig_select`.
    """
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    if p < 2:
        raise ValidationError("p must be >= 2")
    return 2.0 * sigma * np.sqrt(np.log(p) / n)


def threshold_select(beta: np.ndarray, tau: float) -> IndexSet:
    """Indices j with |beta_j| >= tau (inclusive), ascending; may be empty."""
    if tau < 0:
        raise ValidationError("tau must be nonnegative")
    beta = np.asarray(beta, dtype=float).ravel()
    if tau == 0:
        hits = np.flatnonzero(beta != 0.0)
    else:
        hits = np.flatnonzero(np.abs(beta) >= tau)
    return IndexSet(tuple(int(j) + 1 for j in hits))


def sis_screen(X: np.ndarray, y: np.ndarray, keep: int) -> IndexSet:
    """Keep the `keep` predictors with largest |corr(X_j, y)|.

    Ties break toward the smaller index.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    if not 1 <= keep <= p:
        raise ValidationError(f"keep must lie in [1, {p}]")
    zero = zero_scale_columns(X)
    if zero.size:
        raise ZeroVarianceColumn(int(zero[0]) + 1)
    sx = X.std(axis=0)
    sy = y.std()
    if sy <= 1e-14 * max(1.0, abs(float(y.mean()))):
        raise ZeroVarianceColumn("y")
    xc = X - X.mean(axis=0)
    corr = np.abs(xc.T @ (y - y.mean())) / (n * sx * sy)
    order = np.lexsort((np.arange(p), -corr))  # descending |corr|, then index
    return IndexSet.from_iterable(int(j) + 1 for j in order[:keep])


def estimate_sigma(X: np.ndarray, y: np.ndarray) -> float:
    """Noise-scale estimate from the residuals of a marginal-screening fit.

    Regresses y on the top ceil(n/2) screened columns (capped to keep the
    regression overdetermined) and returns sqrt(RSS / (n - k)).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    k = min(int(np.ceil(n / 2)), p, n - 2)
    k = max(k, 1)
    top = sis_screen(X, y, k)
    Zs = X[:, top.zero_based()]
    yc = y - y.mean()
    coef, _, _, _ = np.linalg.lstsq(Zs - Zs.mean(axis=0), yc, rcond=None)
    rss = float(np.sum((yc - (Zs - Zs.mean(axis=0)) @ coef) ** 2))
    dof = max(n - k, 1)
    return float(np.sqrt(rss / dof))

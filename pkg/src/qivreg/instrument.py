"""Construction of the appended instrument column(s) V.

The removed-predictor block U is folded into the kept block Z by (i) picking
a small subset U* of U, (ii) whitening it against Z to form an augmented
vector Z-tilde with near-identity covariance, (iii) estimating the cross-Gram
matrix of cov(U, Z-tilde) through a pairwise U-statistic, and (iv) projecting
Z-tilde onto the leading eigenvectors of that estimate. Two reductions are
provided: a rank-driven choice of the subset size d, and a rank-one
ridge-regularized approximation that always yields a scalar V.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .data import IndexSet, zero_scale_columns
from .errors import (
    DegenerateGram,
    DegenerateSchurComplement,
    MissingUStarColumns,
    QivregWarning,
    ValidationError,
    ZeroMatrix,
    ZeroVarianceColumn,
)

EPS_PD = 1e-8
DEFAULT_RANK_TOL = 0.01

METHOD1 = "method1"
METHOD2 = "method2"


def adaptive_rank_tol(n: int, rank_tol: float | None = None) -> float:
    """Relative eigenvalue cutoff, floored at the pairwise-estimate noise scale.

    The cross-Gram estimate carries O(n^{-1/2}) sampling error, so eigenvalues
    below a few times that cannot be told from zero; a fixed 1% cutoff would
    absorb noise directions at small n. An explicitly supplied tolerance is
    returned unchanged.
    """
    if rank_tol is not None:
        return float(rank_tol)
    return max(DEFAULT_RANK_TOL, 2.0 / np.sqrt(n))


def _matrix_to_doc(M):
    M = np.asarray(M, dtype=float)
    return {"rows": int(M.shape[0]), "cols": int(M.shape[1]), "data": M.tolist()}


def _matrix_from_doc(doc):
    M = np.asarray(doc["data"], dtype=float)
    if M.ndim == 1:
        M = M.reshape(doc["rows"], doc["cols"])
    if M.shape != (doc["rows"], doc["cols"]):
        raise ValidationError("matrix document has inconsistent dimensions")
    return M


@dataclass(frozen=True)
class WhitenPlan:
    """Reusable affine map turning (Z, U*) rows into whitened Z-tilde rows."""

    ustar_indices: IndexSet
    sigma_ustar_ustar: np.ndarray
    sigma_ustar_z: np.ndarray
    whitener: np.ndarray

    @property
    def d(self):
        return len(self.ustar_indices)

    @property
    def q(self):
        return self.sigma_ustar_z.shape[1]

    def apply(self, Z: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Map rows (Z_i, U_i) to Z-tilde_i = (Z_i, W (U*_i - S_uz Z_i))."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if Z.shape[1] != self.q:
            raise ValidationError(f"Z has {Z.shape[1]} columns, expected {self.q}")
        if U.shape[1] < max(self.ustar_indices):
            raise MissingUStarColumns(
                f"U has {U.shape[1]} columns but the plan uses column {max(self.ustar_indices)}"
            )
        Ustar = U[:, self.ustar_indices.zero_based()]
        Utilde = (Ustar - Z @ self.sigma_ustar_z.T) @ self.whitener
        return np.hstack([Z, Utilde])

    def to_dict(self):
        return {
            "ustar_indices": list(self.ustar_indices),
            "sigma_ustar_ustar": _matrix_to_doc(self.sigma_ustar_ustar),
            "sigma_ustar_z": _matrix_to_doc(self.sigma_ustar_z),
            "whitener": _matrix_to_doc(self.whitener),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            ustar_indices=IndexSet(tuple(doc["ustar_indices"])),
            sigma_ustar_ustar=_matrix_from_doc(doc["sigma_ustar_ustar"]),
            sigma_ustar_z=_matrix_from_doc(doc["sigma_ustar_z"]),
            whitener=_matrix_from_doc(doc["whitener"]),
        )


@dataclass(frozen=True)
class InstrumentPlan:
    """Everything needed to map a new (Z, U) row to its instrument value V."""

    whiten: WhitenPlan
    A: np.ndarray
    Q1: np.ndarray
    Q12: np.ndarray
    rank: int
    eigenvalues: np.ndarray
    method: str

    def __post_init__(self):
        if self.method not in (METHOD1, METHOD2):
            raise ValidationError(f"unknown method {self.method!r}")
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if np.max(np.abs(A @ A.T - np.eye(A.shape[0]))) > 1e-10:
            raise ValidationError("plan rows are not orthonormal")
        Q1 = np.atleast_2d(np.asarray(self.Q1, dtype=float))
        if np.max(np.abs(Q1.T @ Q1 - np.eye(self.rank))) > 1e-10:
            raise ValidationError("Q1 columns are not orthonormal")
        vals = np.asarray(self.eigenvalues, dtype=float)
        if np.any(np.diff(vals) > 0) or np.any(vals < -1e-10):
            raise ValidationError("eigenvalues must be descending and nonnegative")

    def apply(self, Z: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Instrument values for new observations: V = Z-tilde @ A.T."""
        return self.whiten.apply(Z, U) @ np.asarray(self.A).T

    def to_dict(self):
        return {
            "method": self.method,
            "rank": int(self.rank),
            "eigenvalues": np.asarray(self.eigenvalues, dtype=float).tolist(),
            "A": _matrix_to_doc(self.A),
            "Q1": _matrix_to_doc(self.Q1),
            "Q12": _matrix_to_doc(self.Q12),
            "whiten": self.whiten.to_dict(),
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, doc):
        return cls(
            whiten=WhitenPlan.from_dict(doc["whiten"]),
            A=_matrix_from_doc(doc["A"]),
            Q1=_matrix_from_doc(doc["Q1"]),
            Q12=_matrix_from_doc(doc["Q12"]),
            rank=int(doc["rank"]),
            eigenvalues=np.asarray(doc["eigenvalues"], dtype=float),
            method=doc["method"],
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def inv_sqrt_psd(M: np.ndarray, eps_pd: float = EPS_PD) -> np.ndarray:
    """Symmetric inverse square root with eigenvalue flooring at eps_pd."""
    M = np.asarray(M, dtype=float)
    vals, vecs = np.linalg.eigh((M + M.T) / 2.0)
    vals = np.maximum(vals, eps_pd)
    return (vecs * (1.0 / np.sqrt(vals))) @ vecs.T


def rank_u_columns(Z: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Order U columns by descending L1 norm of their correlations with Z.

    Returns a permutation of 1..(p-q); ties break toward the smaller index.
    """
    Z = np.asarray(Z, dtype=float)
    U = np.asarray(U, dtype=float)
    n = Z.shape[0]
    zz = zero_scale_columns(Z)
    if zz.size:
        raise ZeroVarianceColumn(int(zz[0]) + 1)
    zu = zero_scale_columns(U)
    if zu.size:
        raise ZeroVarianceColumn(int(zu[0]) + 1)
    sz = Z.std(axis=0)
    su = U.std(axis=0)
    Zc = (Z - Z.mean(axis=0)) / sz
    Uc = (U - U.mean(axis=0)) / su
    corr = (Uc.T @ Zc) / n  # (p-q) x q
    norms = np.abs(corr).sum(axis=1)
    order = np.lexsort((np.arange(norms.shape[0]), -norms))
    return order + 1


def whiten(Z: np.ndarray, U: np.ndarray, ustar_indices: IndexSet):
    """Whiten the chosen U* columns against Z.

    Returns ``(Ztilde, plan)`` where Ztilde has columns (Z, U-tilde) and the
    plan reproduces the same map on new rows. Covariances are divide-by-n
    sample moments of the (already centered) training columns; the kept-block
    covariance is treated as the identity, which standardization guarantees
    only marginally.
    """
    Z = np.asarray(Z, dtype=float)
    U = np.asarray(U, dtype=float)
    n = Z.shape[0]
    if isinstance(ustar_indices, (list, tuple, np.ndarray)):
        ustar_indices = IndexSet.from_iterable(ustar_indices)
    if max(ustar_indices) > U.shape[1]:
        raise ValidationError("ustar index exceeds the number of removed columns")
    Ustar = U[:, ustar_indices.zero_based()]
    S_uu = (Ustar.T @ Ustar) / n
    S_uz = (Ustar.T @ Z) / n
    schur = S_uu - S_uz @ S_uz.T
    schur = (schur + schur.T) / 2.0
    min_eig = float(np.linalg.eigvalsh(schur)[0])
    if min_eig <= EPS_PD:
        raise DegenerateSchurComplement(
            f"U* is (numerically) linearly dependent on Z: min eigenvalue {min_eig:.3e}"
        )
    plan = WhitenPlan(
        ustar_indices=ustar_indices,
        sigma_ustar_ustar=S_uu,
        sigma_ustar_z=S_uz,
        whitener=inv_sqrt_psd(schur),
    )
    return plan.apply(Z, U), plan


def ustat_cross_gram(Ztilde: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Symmetrized pairwise estimate of cov(U, Z-tilde)' cov(U, Z-tilde) / (p-q).

    Equals the O(n^2) double sum over pairs i < j of the kernel
    (U_i . U_j) * sym(Ztilde_i Ztilde_j') / (p-q), computed in O(n p) by
    factorizing the inner product over the removed columns.
    """
    Ztilde = np.asarray(Ztilde, dtype=float)
    U = np.asarray(U, dtype=float)
    n = Ztilde.shape[0]
    if n < 2:
        raise ValidationError("need n >= 2 for the pairwise estimate")
    m = U.shape[1]
    C = Ztilde.T @ U  # (q+d) x (p-q)
    row_sq = np.einsum("ij,ij->i", U, U)
    diag_term = (Ztilde * row_sq[:, None]).T @ Ztilde
    return (C @ C.T - diag_term) / (m * n * (n - 1))


def spectral_factor(M: np.ndarray, rank_tol: float, d: int):
    """Eigendecompose a (q+d)-square symmetric matrix and cut at a rank tolerance.

    Returns ``(Q1, Q12, eigenvalues, rank)``: the leading eigenvectors (columns,
    descending eigenvalue order), their bottom-d row block, the full descending
    spectrum, and the retained rank = #{eigenvalues >= rank_tol * max}.
    """
    M = np.asarray(M, dtype=float)
    if np.max(np.abs(M - M.T)) > 1e-10 * max(1.0, np.max(np.abs(M))):
        raise ValidationError("matrix is not symmetric within tolerance")
    if not 1 <= d <= M.shape[0]:
        raise ValidationError("d must lie in [1, size of M]")
    Msym = (M + M.T) / 2.0
    vals, vecs = np.linalg.eigh(Msym)
    vals = vals[::-1]
    vecs = vecs[:, ::-1]
    scale = float(np.max(np.abs(Msym))) if Msym.size else 0.0
    if scale == 0.0 or vals[0] <= 1e-14 * scale:
        raise ZeroMatrix("cross-Gram estimate carries no instrument information")
    rank = int(np.sum(vals >= rank_tol * vals[0]))
    Q1 = vecs[:, :rank]
    # deterministic eigenvector orientation: largest-|entry| component positive
    for k in range(rank):
        col = Q1[:, k]
        lead = np.argmax(np.abs(col))
        if col[lead] < 0:
            Q1[:, k] = -col
    return Q1, Q1[-d:, :], vals, rank


def select_d(Z: np.ndarray, U: np.ndarray, d_max: int, rank_tol: float | None = None) -> int:
    """Smallest d whose cross-Gram rank r_d satisfies r_d - d <= 1.

    The rank is read off the (q+d)-square pairwise estimate, which shares the
    population rank of the full cross-covariance. Falls back to d_max with a
    warning when no d qualifies.
    """
    if d_max < 1:
        raise ValidationError("d_max must be >= 1")
    d_max = min(d_max, U.shape[1])
    rank_tol = adaptive_rank_tol(Z.shape[0], rank_tol)
    order = rank_u_columns(Z, U)
    for d in range(1, d_max + 1):
        ustar = IndexSet.from_iterable(order[:d])
        try:
            Ztilde, _ = whiten(Z, U, ustar)
            _, _, _, r_d = spectral_factor(ustat_cross_gram(Ztilde, U), rank_tol, d)
        except (DegenerateSchurComplement, ZeroMatrix):
            continue
        if r_d - d <= 1:
            return d
    warnings.warn(
        f"no d <= {d_max} reached rank - d <= 1; using d_max={d_max}", QivregWarning
    )
    return d_max


def build_instrument_m1(Z: np.ndarray, U: np.ndarray, d: int, rank_tol: float | None = None):
    """Rank-reduction construction: whiten top-d ranked U columns, factor, project.

    Returns ``(plan, V)`` with V of shape (n, rank).
    """
    if not 1 <= d <= U.shape[1]:
        raise ValidationError(f"d must lie in [1, {U.shape[1]}]")
    rank_tol = adaptive_rank_tol(Z.shape[0], rank_tol)
    order = rank_u_columns(Z, U)
    ustar = IndexSet.from_iterable(order[:d])
    Ztilde, wplan = whiten(Z, U, ustar)
    M = ustat_cross_gram(Ztilde, U)
    Q1, Q12, vals, rank = spectral_factor(M, rank_tol, d)
    col_mass = np.sum(Q12**2, axis=0)
    if float(np.min(col_mass)) < 1e-3:
        warnings.warn(
            f"an instrument direction lies nearly inside the kept block "
            f"(removed-block weight {float(np.min(col_mass)):.2e})",
            QivregWarning,
        )
    plan = InstrumentPlan(
        whiten=wplan,
        A=Q1.T.copy(),
        Q1=Q1,
        Q12=Q12,
        rank=rank,
        eigenvalues=vals[:rank].copy(),
        method=METHOD1,
    )
    # V through the same code path the stored plan uses, so reapplying the
    # plan to the training sample reproduces it bit for bit
    return plan, plan.apply(Z, U)


def ridge_rank1_direction(P: np.ndarray, G: np.ndarray, c: float, c_k: float) -> np.ndarray:
    """Unit row vector approximating the projector P as a'a.

    Row k of the candidate solves a ridge-regularized least-squares fit of
    (a_k a) Z-tilde to (row k of P) Z-tilde; the magnitudes |a_k| come from the
    row norms and the signs from alignment with the first row. The result is
    renormalized to unit length.
    """
    P = np.asarray(P, dtype=float)
    G = np.asarray(G, dtype=float)
    if c <= 0 or c_k <= 0:
        raise ValidationError("c and c_k must be positive")
    m = G.shape[0]
    reg = G + c_k * np.eye(m)
    min_eig = float(np.linalg.eigvalsh((reg + reg.T) / 2.0)[0])
    if min_eig <= 0:
        raise DegenerateGram("ridge-regularized Gram is singular")  # impossible for c_k > 0
    rows = np.empty((m, m))
    for k in range(m):
        target = P[k] @ G + (c * c_k / 2.0) * np.eye(m)[k]
        rows[k] = np.linalg.solve(reg.T, target)
    a = np.linalg.norm(rows, axis=1)
    for k in range(1, m):
        dot = float(rows[k] @ rows[0])
        if dot < 0:
            a[k] = -a[k]
    norm = float(np.linalg.norm(a))
    if norm == 0.0:
        raise DegenerateGram("rank-one direction collapsed to zero")
    return a / norm


def build_instrument_m2(
    Z: np.ndarray,
    U: np.ndarray,
    c: float = 2.0,
    c_k: float = 0.2,
    rank_tol: float | None = None,
):
    """Rank-one approximation: always returns a scalar instrument (d = 1).

    The projector onto the leading eigenspace of the cross-Gram estimate is
    approximated by a rank-one a'a with ||a|| = 1; V = Z-tilde @ a'.
    """
    rank_tol = adaptive_rank_tol(Z.shape[0], rank_tol)
    order = rank_u_columns(Z, U)
    ustar = IndexSet.from_iterable(order[:1])
    Ztilde, wplan = whiten(Z, U, ustar)
    M = ustat_cross_gram(Ztilde, U)
    Q1, _, vals, _ = spectral_factor(M, rank_tol, 1)
    P = Q1 @ Q1.T
    G = (Ztilde.T @ Ztilde) / Ztilde.shape[0]
    a = ridge_rank1_direction(P, G, c, c_k)
    if a[-1] ** 2 < 1e-3:
        warnings.warn(
            f"instrument direction nearly inside the kept block "
            f"(whitened-coordinate weight {a[-1]:.2e})",
            QivregWarning,
        )
    A = a.reshape(1, -1)
    plan = InstrumentPlan(
        whiten=wplan,
        A=A,
        Q1=A.T.copy(),
        Q12=A.T[-1:, :].copy(),
        rank=1,
        eigenvalues=vals[:1].copy(),
        method=METHOD2,
    )
    return plan, plan.apply(Z, U)

"""Downstream estimators: pairwise correlation MLE and OLS.

These are the statistics computed on real and synthetic datasets by the
simulation harness; they are deliberately small and dependency-light so
their outputs can be compared bit-for-bit across mechanisms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .numerics import ContractError

__all__ = [
    "SingularDesignError",
    "OlsFit",
    "pearson",
    "cs_corr_mle",
    "ols_fit",
]

_PIVOT_RTOL = 1e-10


class SingularDesignError(ValueError):
    """Design matrix is rank deficient; carries the offending column."""

    def __init__(self, message: str, column: int):
        super().__init__(message)
        self.column = column


def pearson(x, y) -> float:
    """Sample Pearson correlation of two equal-length vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ContractError(f"need equal-length vectors, got {x.shape}, {y.shape}")
    if x.size < 2:
        raise ContractError("need at least two observations")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.sum(xc * xc))
    sy = np.sqrt(np.sum(yc * yc))
    if sx == 0.0 or sy == 0.0:
        raise ContractError("zero-variance input")
    return float(np.clip(np.dot(xc, yc) / (sx * sy), -1.0, 1.0))


def cs_corr_mle(X) -> float:
    """Common correlation under compound symmetry: the average of all
    d(d-1)/2 pairwise Pearson correlations."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ContractError("need an n x d matrix with d >= 2")
    if np.any(X.std(axis=0) == 0.0):
        col = int(np.argmin(X.std(axis=0)))
        raise ContractError(f"column {col} has zero variance")
    c = np.corrcoef(X.T)
    iu = np.triu_indices_from(c, k=1)
    return float(np.mean(c[iu]))


@dataclass
class OlsFit:
    coefficients: np.ndarray  # intercept first
    variances: np.ndarray     # diagonal of sigma2 * (X'X)^{-1}
    sigma2: float             # unbiased residual variance
    n: int
    p: int


def ols_fit(X, y) -> OlsFit:
    """Least squares with an intercept, solved by column-pivoted QR.

    Raises :class:`SingularDesignError` naming the first dependent
    column (-1 for the intercept) when the design is rank deficient.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if y.shape != (n,):
        raise ContractError(f"y has shape {y.shape}, expected ({n},)")
    if n <= p + 1:
        raise ContractError(f"need n > p+1 rows, got n={n}, p={p}")
    design = np.hstack([np.ones((n, 1)), X])
    q, r, piv = sla.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = _PIVOT_RTOL * diag[0]
    bad = np.nonzero(diag < tol)[0]
    if bad.size:
        col = int(piv[bad[0]])
        raise SingularDesignError(
            f"design is rank deficient at pivot {bad[0]} "
            f"(design column {col}, -1-based intercept is column 0)",
            column=col - 1,
        )
    beta_piv = sla.solve_triangular(r, q.T @ y)
    beta = np.empty_like(beta_piv)
    beta[piv] = beta_piv
    resid = y - design @ beta
    rss = float(resid @ resid)
    sigma2 = rss / (n - p - 1)
    r_inv = sla.solve_triangular(r, np.eye(p + 1))
    xtx_inv_piv = r_inv @ r_inv.T
    var = np.empty(p + 1)
    var[piv] = sigma2 * np.diag(xtx_inv_piv)
    return OlsFit(coefficients=beta, variances=var, sigma2=sigma2, n=n, p=p)

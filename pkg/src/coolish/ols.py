"""Ordinary least squares for a shared design and many outcomes.

Everything downstream (shrinkage features, bias correction, oracle
estimators) is derived from an :class:`OlsFit`, so the fit caches the few
cross-outcome summaries the per-point computations need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DegenerateSample, RankDeficient, ShapeMismatch

RANK_TOL = 1e-10
NORMAL_EQ_TOL = 1e-8


@dataclass(frozen=True)
class Dataset:
    """Training data: ``X`` is n x p, ``Y`` is n x q."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        Y = np.asarray(self.Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[0] != Y.shape[0]:
            raise ShapeMismatch(
                f"X has {X.shape[0]} rows but Y has {Y.shape[0]} rows"
            )
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class OlsFit:
    """Per-outcome OLS estimates.

    Attributes
    ----------
    B_hat : ndarray, shape (p, q)
    gram_inv : ndarray, shape (p, p)
        ``(X^T X)^{-1}``.
    sigma2_hat : ndarray, shape (q,)
        Unbiased residual variance of each outcome, ``||r_k||^2 / (n - p)``.
    coef_gram : ndarray, shape (p, p)
        ``B_hat @ B_hat.T``; with ``coef_sum`` it gives X~^T X~ in O(p^2).
    coef_sum : ndarray, shape (p,)
        Row sums of ``B_hat``.
    """

    B_hat: np.ndarray
    gram_inv: np.ndarray
    sigma2_hat: np.ndarray
    n: int
    p: int
    q: int
    coef_gram: np.ndarray = field(repr=False)
    coef_sum: np.ndarray = field(repr=False)

    @property
    def mean_sigma2(self) -> float:
        return float(np.mean(self.sigma2_hat))


@dataclass(frozen=True)
class PredictiveMoments:
    y0_hat: np.ndarray
    sigma2_0: np.ndarray
    c_x0: float
    w: np.ndarray


def fit_ols(data: Dataset) -> OlsFit:
    """Fit OLS of every column of ``Y`` on ``X`` through a Cholesky factor.

    Raises
    ------
    DegenerateSample
        If ``n <= p``.
    RankDeficient
        If the smallest eigenvalue of ``X^T X / n`` is below 1e-10.
    """
    X, Y = data.X, data.Y
    n, p = X.shape
    q = Y.shape[1]
    if p < 1:
        raise ShapeMismatch("design must have at least one column")
    if n <= p:
        raise DegenerateSample(f"need n > p for residual variance, got n={n}, p={p}")

    gram = X.T @ X
    eig_min = linalg.eigvalsh(gram / n, subset_by_index=[0, 0])[0]
    if eig_min < RANK_TOL:
        raise RankDeficient(
            f"X^T X / n has smallest eigenvalue {eig_min:.3e} < {RANK_TOL:g}"
        )

    factor = linalg.cho_factor(gram, lower=True)
    xty = X.T @ Y
    B_hat = linalg.cho_solve(factor, xty)
    gram_inv = linalg.cho_solve(factor, np.eye(p))
    gram_inv = 0.5 * (gram_inv + gram_inv.T)

    resid = Y - X @ B_hat
    sigma2_hat = np.einsum("ij,ij->j", resid, resid) / (n - p)

    return OlsFit(
        B_hat=B_hat,
        gram_inv=gram_inv,
        sigma2_hat=sigma2_hat,
        n=n,
        p=p,
        q=q,
        coef_gram=B_hat @ B_hat.T,
        coef_sum=B_hat.sum(axis=1),
    )


def normal_equation_residual(data: Dataset, fit: OlsFit) -> float:
    """Relative sup-norm residual ``||X^T X B - X^T Y|| / ||X^T Y||``."""
    xty = data.X.T @ data.Y
    lhs = data.X.T @ (data.X @ fit.B_hat)
    scale = np.max(np.abs(xty))
    if scale == 0:
        return float(np.max(np.abs(lhs)))
    return float(np.max(np.abs(lhs - xty)) / scale)


def _check_x0(fit: OlsFit, x0) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1 or x0.shape[0] != fit.p:
        raise ShapeMismatch(f"x0 must have length {fit.p}, got shape {x0.shape}")
    return x0


def predictive_moments(fit: OlsFit, x0) -> PredictiveMoments:
    """OLS prediction at ``x0`` and its estimated variance for each outcome."""
    x0 = _check_x0(fit, x0)
    w = fit.gram_inv @ x0
    c_x0 = float(x0 @ w)
    return PredictiveMoments(
        y0_hat=fit.B_hat.T @ x0,
        sigma2_0=fit.sigma2_hat * c_x0,
        c_x0=c_x0,
        w=w,
    )

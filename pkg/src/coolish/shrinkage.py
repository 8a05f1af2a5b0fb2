"""Coordinate-wise linear shrinkage of OLS predictions.

For a new covariate vector ``x0`` the prediction for outcome ``k`` is

    delta_k = theta_0 + sum_j x0[j] * B_hat[j, k] * theta_j,

i.e. a linear regression across outcomes on the features
``X~_k = (1, x0[0] B_hat[0, k], ..., x0[p-1] B_hat[p-1, k])``. The weights are
chosen by minimizing an unbiased estimate of the compound prediction risk,
either freely or inside the box ``theta_0 in [-M, M]``, ``theta_j in [0, M]``.

All per-point work runs on the (p+1) x (p+1) Gram matrix of ``X~`` and its
cross-product with the OLS predictions, which the fit's cached
``B_hat @ B_hat.T`` gives in O(p^2) instead of O(q p^2).
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .boxqp import minimize_box_quadratic
from .errors import IllPosed, InvalidBound, NoConvergence, ShapeMismatch
from .ols import OlsFit, _check_x0

logger = logging.getLogger(__name__)

DEFAULT_M = 1e6
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000
ILL_POSED_TOL = 1e-12

RULES = ("ols", "unconstrained", "constrained")


class SolveMode(enum.Enum):
    UNCONSTRAINED = "unconstrained"
    CONSTRAINED = "constrained"
    ORACLE_UNCONSTRAINED = "oracle-unconstrained"
    ORACLE_CONSTRAINED = "oracle-constrained"


@dataclass(frozen=True)
class ShrinkagePoint:
    """Everything the risk estimate needs at one test point.

    ``gram``, ``xty`` and ``yty`` are ``X~^T X~``, ``X~^T y0_hat`` and
    ``y0_hat^T y0_hat``. ``x_tilde`` itself is built on demand.
    """

    x0: np.ndarray
    y0_hat: np.ndarray
    q_vec: np.ndarray
    sigma2_0: np.ndarray
    c_x0: float
    w: np.ndarray
    B_hat: np.ndarray
    gram: np.ndarray
    xty: np.ndarray
    yty: float

    @property
    def p(self) -> int:
        return self.x0.shape[0]

    @property
    def q(self) -> int:
        return self.y0_hat.shape[0]

    @property
    def x_tilde(self) -> np.ndarray:
        out = np.empty((self.q, self.p + 1))
        out[:, 0] = 1.0
        out[:, 1:] = self.B_hat.T * self.x0
        return out

    def features_times(self, theta) -> np.ndarray:
        """``X~ @ theta`` without materializing ``X~``."""
        return theta[0] + self.B_hat.T @ (self.x0 * theta[1:])

    def cross_with(self, target) -> np.ndarray:
        """``X~^T @ target`` for a length-q vector."""
        return np.concatenate(([target.sum()], self.x0 * (self.B_hat @ target)))


@dataclass(frozen=True)
class ThetaSolution:
    """Shrinkage weights and solver diagnostics.

    ``empirical_risk`` is the unbiased risk estimate at ``theta``; for the
    oracle modes ``objective`` holds the true loss they minimized instead.
    ``kkt_residual`` is the sup-norm of the (projected) gradient divided by
    ``1 + ||X~^T target||_inf / q``.
    """

    theta: np.ndarray
    mode: SolveMode
    empirical_risk: float
    iterations: int
    kkt_residual: float
    M: Optional[float] = None
    objective: Optional[float] = None
    converged: bool = True


def make_point(x0, B_hat, gram_inv, sigma2_hat, coef_gram=None, coef_sum=None) -> ShrinkagePoint:
    """Assemble a :class:`ShrinkagePoint` from raw OLS quantities.

    Unlike :func:`build_point` this accepts ``p = 0`` (intercept-only rule).
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    B_hat = np.asarray(B_hat, dtype=np.float64)
    gram_inv = np.asarray(gram_inv, dtype=np.float64)
    sigma2_hat = np.asarray(sigma2_hat, dtype=np.float64).reshape(-1)
    if B_hat.ndim != 2 or B_hat.shape[0] != x0.shape[0]:
        raise ShapeMismatch(f"B_hat must have {x0.shape[0]} rows, got shape {B_hat.shape}")
    p, q = B_hat.shape
    if gram_inv.shape != (p, p):
        raise ShapeMismatch(f"gram_inv must be {p} x {p}, got shape {gram_inv.shape}")
    if sigma2_hat.shape[0] != q:
        raise ShapeMismatch(f"sigma2_hat has length {sigma2_hat.shape[0]}, expected {q}")
    if coef_gram is None:
        coef_gram = B_hat @ B_hat.T
    if coef_sum is None:
        coef_sum = B_hat.sum(axis=1)

    w = gram_inv @ x0
    c_x0 = float(x0 @ w)
    y0_hat = B_hat.T @ x0
    q_vec = np.concatenate(([0.0], x0 * w * np.mean(sigma2_hat)))

    gram = np.empty((p + 1, p + 1))
    gram[0, 0] = q
    gram[0, 1:] = gram[1:, 0] = coef_sum * x0
    gram[1:, 1:] = coef_gram * np.outer(x0, x0)
    s_x0 = coef_gram @ x0
    xty = np.concatenate(([coef_sum @ x0], x0 * s_x0))

    return ShrinkagePoint(
        x0=x0,
        y0_hat=y0_hat,
        q_vec=q_vec,
        sigma2_0=sigma2_hat * c_x0,
        c_x0=c_x0,
        w=w,
        B_hat=B_hat,
        gram=gram,
        xty=xty,
        yty=float(x0 @ s_x0),
    )


def build_point(fit: OlsFit, x0) -> ShrinkagePoint:
    x0 = _check_x0(fit, x0)
    return make_point(x0, fit.B_hat, fit.gram_inv, fit.sigma2_hat, fit.coef_gram, fit.coef_sum)


def _check_theta(pt: ShrinkagePoint, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (pt.p + 1,):
        raise ShapeMismatch(f"theta must have length {pt.p + 1}, got shape {theta.shape}")
    return theta


def ols_theta(p: int) -> np.ndarray:
    """Weights that reproduce the plain OLS prediction."""
    theta = np.ones(p + 1)
    theta[0] = 0.0
    return theta


def empirical_risk(pt: ShrinkagePoint, theta) -> float:
    theta = _check_theta(pt, theta)
    resid = pt.y0_hat - pt.features_times(theta)
    return float(-np.mean(pt.sigma2_0) + np.mean(resid**2) + 2.0 * pt.q_vec @ theta)


def empirical_risk_gradient(pt: ShrinkagePoint, theta) -> np.ndarray:
    theta = _check_theta(pt, theta)
    resid = pt.y0_hat - pt.features_times(theta)
    return -2.0 / pt.q * pt.cross_with(resid) + 2.0 * pt.q_vec


def true_loss(pt: ShrinkagePoint, B, theta) -> float:
    """Average squared error against the true means ``B^T x0`` (simulation only)."""
    theta = _check_theta(pt, theta)
    B = np.asarray(B, dtype=np.float64)
    if B.shape != pt.B_hat.shape:
        raise ShapeMismatch(f"B has shape {B.shape}, expected {pt.B_hat.shape}")
    err = B.T @ pt.x0 - pt.features_times(theta)
    return float(np.mean(err**2))


def _kkt_scale(pt: ShrinkagePoint, xty) -> float:
    return 1.0 + float(np.max(np.abs(xty))) / pt.q


def _solve_normal(pt: ShrinkagePoint, rhs) -> np.ndarray:
    p1 = pt.p + 1
    if pt.q <= p1:
        raise IllPosed(
            f"unconstrained rule needs q > p + 1 (q={pt.q}, p={pt.p}); use the constrained rule"
        )
    evals = linalg.eigvalsh(pt.gram / pt.q)
    if evals[0] < ILL_POSED_TOL * evals[-1] or evals[-1] <= 0:
        raise IllPosed(
            "X~^T X~ is numerically singular "
            f"(eigenvalue ratio {evals[0] / max(evals[-1], 1e-300):.2e}); use the constrained rule"
        )
    factor = linalg.cho_factor(pt.gram, lower=True)
    theta = linalg.cho_solve(factor, rhs)
    # one step of iterative refinement
    theta += linalg.cho_solve(factor, rhs - pt.gram @ theta)
    return theta


def solve_unconstrained(pt: ShrinkagePoint) -> ThetaSolution:
    """Exact stationary point of the empirical risk.

    Solves ``(X~^T X~) theta = X~^T y0_hat - q Q``.
    """
    theta = _solve_normal(pt, pt.xty - pt.q * pt.q_vec)
    grad = empirical_risk_gradient(pt, theta)
    return ThetaSolution(
        theta=theta,
        mode=SolveMode.UNCONSTRAINED,
        empirical_risk=empirical_risk(pt, theta),
        iterations=0,
        kkt_residual=float(np.max(np.abs(grad))) / _kkt_scale(pt, pt.xty),
    )


def box_bounds(p: int, M: float):
    lo = np.zeros(p + 1)
    lo[0] = -M
    hi = np.full(p + 1, float(M))
    return lo, hi


def _box_solve(pt, rhs, M, tol, max_iter, warm_start, mode, objective_fn):
    if not M > 0:
        raise InvalidBound(f"box half-width M must be positive, got {M}")
    lo, hi = box_bounds(pt.p, M)

    if warm_start is None:
        try:
            warm_start = _solve_normal(pt, rhs)
        except (IllPosed, linalg.LinAlgError):
            warm_start = ols_theta(pt.p)
    else:
        warm_start = _check_theta(pt, warm_start)

    scale = _kkt_scale(pt, rhs)
    # empirical risk = theta^T (G/q) theta - 2 (rhs/q)^T theta + const
    res = minimize_box_quadratic(
        2.0 * pt.gram / pt.q,
        2.0 * rhs / pt.q,
        lo,
        hi,
        x_init=warm_start,
        tol=tol * scale,
        max_iter=max_iter,
    )
    sol = ThetaSolution(
        theta=res.x,
        mode=mode,
        empirical_risk=empirical_risk(pt, res.x),
        iterations=res.iterations,
        kkt_residual=res.kkt_residual / scale,
        M=float(M),
        objective=objective_fn(res.x),
        converged=res.converged,
    )
    if not res.converged:
        raise NoConvergence(
            f"box solver stopped after {res.iterations} sweeps with KKT residual "
            f"{sol.kkt_residual:.3e} > {tol:g}",
            solution=sol,
        )
    return sol


def solve_constrained(
    pt: ShrinkagePoint,
    M: float = DEFAULT_M,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    warm_start=None,
) -> ThetaSolution:
    """Minimize the empirical risk over ``theta_0 in [-M, M]``, ``theta_j in [0, M]``.

    Raises :class:`NoConvergence` (with the best iterate attached) if the KKT
    residual is still above ``tol`` after ``max_iter`` sweeps.
    """
    return _box_solve(
        pt,
        pt.xty - pt.q * pt.q_vec,
        M,
        tol,
        max_iter,
        warm_start,
        SolveMode.CONSTRAINED,
        lambda th: empirical_risk(pt, th),
    )


def oracle_unconstrained(pt: ShrinkagePoint, B) -> ThetaSolution:
    """Least-squares fit of ``X~`` to the true means ``B^T x0``."""
    target = np.asarray(B, dtype=np.float64).T @ pt.x0
    rhs = pt.cross_with(target)
    theta = _solve_normal(pt, rhs)
    grad = 2.0 / pt.q * (pt.gram @ theta - rhs)
    return ThetaSolution(
        theta=theta,
        mode=SolveMode.ORACLE_UNCONSTRAINED,
        empirical_risk=empirical_risk(pt, theta),
        iterations=0,
        kkt_residual=float(np.max(np.abs(grad))) / _kkt_scale(pt, rhs),
        objective=true_loss(pt, B, theta),
    )


def oracle_constrained(
    pt: ShrinkagePoint,
    B,
    M: float = DEFAULT_M,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> ThetaSolution:
    target = np.asarray(B, dtype=np.float64).T @ pt.x0
    return _box_solve(
        pt,
        pt.cross_with(target),
        M,
        tol,
        max_iter,
        None,
        SolveMode.ORACLE_CONSTRAINED,
        lambda th: true_loss(pt, B, th),
    )


def solve_rule(pt: ShrinkagePoint, rule: str, M: float = DEFAULT_M) -> np.ndarray:
    """Weights for ``rule`` in {"ols", "unconstrained", "constrained"}.

    A constrained solve that runs out of sweeps falls back to its best
    iterate with a warning rather than failing the whole batch.
    """
    if rule == "ols":
        return ols_theta(pt.p)
    if rule == "unconstrained":
        return solve_unconstrained(pt).theta
    if rule == "constrained":
        try:
            return solve_constrained(pt, M).theta
        except NoConvergence as exc:
            logger.warning("%s; using best iterate", exc)
            return exc.solution.theta
    raise ValueError(f"unknown rule {rule!r}; expected one of {RULES}")


def predict_point(fit: OlsFit, x0, rule: str = "constrained", M: float = DEFAULT_M) -> np.ndarray:
    pt = build_point(fit, x0)
    if rule == "ols":
        return pt.y0_hat.copy()
    return pt.features_times(solve_rule(pt, rule, M))


def predict(fit: OlsFit, X0, rule: str = "constrained", M: float = DEFAULT_M, threads: int = 1) -> np.ndarray:
    """Predict every row of ``X0``; the weights are re-estimated per row."""
    X0 = np.atleast_2d(np.asarray(X0, dtype=np.float64))
    if X0.shape[1] != fit.p:
        raise ShapeMismatch(f"test design has {X0.shape[1]} columns, expected {fit.p}")
    if rule == "ols":
        return X0 @ fit.B_hat

    def one(i):
        return predict_point(fit, X0[i], rule, M)

    if threads > 1 and X0.shape[0] > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(X0.shape[0])))
    else:
        rows = [one(i) for i in range(X0.shape[0])]
    return np.vstack(rows) if rows else np.empty((0, fit.q))

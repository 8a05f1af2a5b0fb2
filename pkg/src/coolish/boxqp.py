"""Convex quadratic minimization over a box.

Solves ``min 0.5 x^T A x - b^T x`` subject to ``lo <= x <= hi`` for a
symmetric positive semidefinite ``A``. Each outer iteration is one cyclic
coordinate-descent sweep (exact one-dimensional minimization, then clipping)
followed by a Newton step restricted to the coordinates strictly inside the
box. The Newton step is truncated at the first bound it meets, so every
iteration is monotone; singular reduced Hessians fall back to a
pseudo-inverse direction, which is still a descent direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg


@dataclass(frozen=True)
class BoxQPResult:
    x: np.ndarray
    objective: float
    iterations: int
    kkt_residual: float
    converged: bool


def quadratic_value(A, b, x) -> float:
    return float(0.5 * x @ (A @ x) - b @ x)


def projected_gradient_residual(x, g, lo, hi) -> float:
    """Largest violation of the box KKT conditions.

    Interior coordinates contribute ``|g_j|``; a coordinate at its lower
    (upper) bound contributes only the part of ``g_j`` pointing into the box.
    """
    at_lo = x <= lo
    at_hi = x >= hi
    viol = np.abs(g)
    viol = np.where(at_lo, np.maximum(-g, 0.0), viol)
    viol = np.where(at_hi, np.maximum(g, 0.0), viol)
    viol = np.where(at_lo & at_hi, 0.0, viol)
    return float(np.max(viol)) if viol.size else 0.0


def _coordinate_sweep(A, x, g, lo, hi):
    diag = np.diag(A)
    for j in range(x.shape[0]):
        if diag[j] > 0:
            new = min(max(x[j] - g[j] / diag[j], lo[j]), hi[j])
        elif g[j] > 0:
            new = lo[j]
        elif g[j] < 0:
            new = hi[j]
        else:
            continue
        delta = new - x[j]
        if delta != 0.0:
            x[j] = new
            g += A[:, j] * delta


def _subspace_direction(A_ff, g_f):
    try:
        factor = linalg.cho_factor(A_ff, lower=True, check_finite=False)
        d = -linalg.cho_solve(factor, g_f, check_finite=False)
        if np.all(np.isfinite(d)):
            return d
    except linalg.LinAlgError:
        pass
    evals, evecs = linalg.eigh(A_ff)
    cutoff = max(evals.max(initial=0.0), 0.0) * A_ff.shape[0] * np.finfo(float).eps
    keep = evals > cutoff
    if not np.any(keep):
        return None
    V = evecs[:, keep]
    return -(V @ ((V.T @ g_f) / evals[keep]))


def _newton_step(A, b, x, g, lo, hi):
    free = np.flatnonzero((x > lo) & (x < hi))
    if free.size == 0:
        return
    d = _subspace_direction(A[np.ix_(free, free)], g[free])
    if d is None or not np.any(d):
        return
    xf = x[free]
    with np.errstate(divide="ignore", invalid="ignore"):
        step_hi = np.where(d > 0, (hi[free] - xf) / d, np.inf)
        step_lo = np.where(d < 0, (lo[free] - xf) / d, np.inf)
    limits = np.minimum(step_hi, step_lo)
    alpha = min(1.0, float(limits.min()))
    if alpha <= 0.0:
        return
    new = xf + alpha * d
    if alpha < 1.0:
        hit = limits <= alpha
        new[hit & (d > 0)] = hi[free][hit & (d > 0)]
        new[hit & (d < 0)] = lo[free][hit & (d < 0)]
    new = np.clip(new, lo[free], hi[free])
    trial = x.copy()
    trial[free] = new
    # guard against roundoff when the reduced Hessian is nearly singular
    if quadratic_value(A, b, trial) <= quadratic_value(A, b, x):
        x[free] = new
        g[:] = A @ x - b


def minimize_box_quadratic(A, b, lo, hi, x_init=None, tol=1e-10, max_iter=10_000):
    """Minimize ``0.5 x^T A x - b^T x`` over the box ``[lo, hi]``.

    ``tol`` bounds the returned :func:`projected_gradient_residual`. The result
    always carries the best iterate; ``converged`` is False when the budget of
    ``max_iter`` sweeps ran out first.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), b.shape).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), b.shape).copy()
    if np.any(lo > hi):
        raise ValueError("empty box: some lower bound exceeds its upper bound")
    x = np.zeros_like(b) if x_init is None else np.array(x_init, dtype=np.float64)
    x = np.clip(x, lo, hi)
    g = A @ x - b

    residual = projected_gradient_residual(x, g, lo, hi)
    iterations = 0
    while residual > tol and iterations < max_iter:
        iterations += 1
        _coordinate_sweep(A, x, g, lo, hi)
        _newton_step(A, b, x, g, lo, hi)
        # refresh to stop drift from the incremental gradient updates
        g = A @ x - b
        residual = projected_gradient_residual(x, g, lo, hi)

    return BoxQPResult(
        x=x,
        objective=quadratic_value(A, b, x),
        iterations=iterations,
        kkt_residual=residual,
        converged=residual <= tol,
    )

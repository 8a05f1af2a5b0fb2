import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coolish.errors import IllPosed, InvalidBound, NoConvergence, ShapeMismatch
from coolish.ols import Dataset, fit_ols
from coolish.shrinkage import (
    SolveMode,
    box_bounds,
    build_point,
    empirical_risk,
    empirical_risk_gradient,
    make_point,
    ols_theta,
    oracle_constrained,
    oracle_unconstrained,
    predict,
    predict_point,
    solve_constrained,
    solve_unconstrained,
    true_loss,
)

from oracles import (
    active_set_enumeration,
    brute_risk,
    explicit_quadratic,
    finite_difference_gradient,
    projected_gradient_minimizer,
    q_double_sum,
    random_problem,
)


def _point(seed, **kw):
    rng = np.random.default_rng(seed)
    X, Y, B, x0 = random_problem(rng, **kw)
    fit = fit_ols(Dataset(X, Y))
    return fit, build_point(fit, x0), B


class TestBuildPoint:
    def test_zero_covariate(self, rng):
        X, Y, _, _ = random_problem(rng, p=3, q=20)
        pt = build_point(fit_ols(Dataset(X, Y)), np.zeros(3))
        assert not np.any(pt.q_vec)
        expected = np.zeros((20, 4))
        expected[:, 0] = 1.0
        np.testing.assert_array_equal(pt.x_tilde, expected)

    def test_identity_gram_hand_value(self):
        pt = make_point(
            np.array([1.0, 1.0]),
            np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]]),
            np.eye(2),
            np.full(3, 2.0),
        )
        np.testing.assert_allclose(pt.q_vec, [0.0, 2.0, 2.0])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_q_matches_double_sum(self, seed):
        fit, pt, _ = _point(seed, q=40)
        ref = q_double_sum(pt.x0, fit.gram_inv, fit.sigma2_hat)
        np.testing.assert_allclose(pt.q_vec, ref, rtol=1e-10, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_invariants(self, seed):
        fit, pt, _ = _point(seed)
        Xt = pt.x_tilde
        assert np.all(Xt[:, 0] == 1.0)
        np.testing.assert_array_equal(Xt[:, 1:], (pt.x0[:, None] * fit.B_hat).T)
        np.testing.assert_allclose(Xt[:, 1:].sum(axis=1), pt.y0_hat, atol=1e-10)
        assert pt.q_vec[0] == 0.0
        signs = pt.x0 * pt.w
        assert np.all(pt.q_vec[1:][signs >= 0] >= 0)
        # sufficient statistics agree with the explicit feature matrix
        np.testing.assert_allclose(pt.gram, Xt.T @ Xt, rtol=1e-10, atol=1e-9)
        np.testing.assert_allclose(pt.xty, Xt.T @ pt.y0_hat, rtol=1e-10, atol=1e-9)

    def test_shape_mismatch(self, rng):
        X, Y, _, _ = random_problem(rng, p=3, q=20)
        with pytest.raises(ShapeMismatch):
            build_point(fit_ols(Dataset(X, Y)), np.ones(2))


class TestEmpiricalRisk:
    def test_zero_theta(self):
        _, pt, _ = _point(1)
        expected = -np.mean(pt.sigma2_0) + np.mean(pt.y0_hat**2)
        assert empirical_risk(pt, np.zeros(pt.p + 1)) == pytest.approx(expected, rel=1e-12)

    def test_ols_theta(self):
        _, pt, _ = _point(2)
        expected = -np.mean(pt.sigma2_0) + 2 * pt.q_vec[1:].sum()
        assert empirical_risk(pt, ols_theta(pt.p)) == pytest.approx(expected, rel=1e-10, abs=1e-12)

    def test_matches_loops(self):
        _, pt, _ = _point(3, q=60)
        theta = np.random.default_rng(0).normal(size=pt.p + 1)
        assert empirical_risk(pt, theta) == pytest.approx(brute_risk(pt, theta), rel=1e-10)

    def test_wrong_theta_length(self):
        _, pt, _ = _point(4)
        with pytest.raises(ShapeMismatch):
            empirical_risk(pt, np.zeros(pt.p + 2))


class TestGradient:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_finite_differences(self, seed):
        _, pt, _ = _point(seed)
        theta = np.random.default_rng(seed).normal(size=pt.p + 1)
        fd = finite_difference_gradient(lambda t: empirical_risk(pt, t), theta, h=1e-5)
        np.testing.assert_allclose(empirical_risk_gradient(pt, theta), fd, atol=1e-6)

    def test_vanishes_at_least_squares_when_no_penalty(self):
        _, pt, _ = _point(5)
        pt0 = make_point(pt.x0, pt.B_hat, np.zeros((pt.p, pt.p)), np.zeros(pt.q))
        theta = np.linalg.lstsq(pt0.x_tilde, pt0.y0_hat, rcond=None)[0]
        assert np.max(np.abs(empirical_risk_gradient(pt0, theta))) <= 1e-10


class TestSolveUnconstrained:
    def test_noiseless_recovers_ols_weights(self):
        rng = np.random.default_rng(6)
        X, _, B, x0 = random_problem(rng, p=4, q=50)
        fit = fit_ols(Dataset(X, X @ B))
        pt = build_point(fit, x0)
        assert np.max(np.abs(pt.q_vec)) < 1e-20
        sol = solve_unconstrained(pt)
        np.testing.assert_allclose(sol.theta, ols_theta(4), atol=1e-8)
        np.testing.assert_allclose(pt.features_times(sol.theta), pt.y0_hat, atol=1e-8)

    def test_zero_penalty_is_least_squares(self):
        _, pt, _ = _point(7)
        pt0 = make_point(pt.x0, pt.B_hat, np.zeros((pt.p, pt.p)), np.zeros(pt.q))
        ref = np.linalg.lstsq(pt0.x_tilde, pt0.y0_hat, rcond=None)[0]
        np.testing.assert_allclose(solve_unconstrained(pt0).theta, ref, rtol=1e-8, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_global_minimum(self, seed):
        _, pt, _ = _point(seed)
        sol = solve_unconstrained(pt)
        rng = np.random.default_rng(seed)
        base = empirical_risk(pt, sol.theta)
        for _ in range(1000 // 30):
            other = sol.theta + rng.normal(scale=10.0 ** rng.uniform(-4, 1), size=pt.p + 1)
            assert base <= empirical_risk(pt, other) + 1e-12
        A, b, _ = explicit_quadratic(pt)
        ref = projected_gradient_minimizer(A, b, np.full(pt.p + 1, -1e9), np.full(pt.p + 1, 1e9))
        np.testing.assert_allclose(sol.theta, ref, atol=1e-6)

    def test_stationarity(self):
        for seed in range(20):
            _, pt, _ = _point(seed)
            sol = solve_unconstrained(pt)
            grad = empirical_risk_gradient(pt, sol.theta)
            bound = 1e-8 * (1 + np.max(np.abs(pt.xty)) / pt.q)
            assert np.max(np.abs(grad)) <= bound
            assert sol.kkt_residual <= 1e-8
            assert sol.mode is SolveMode.UNCONSTRAINED

    def test_too_few_outcomes(self):
        _, pt, _ = _point(8, p=4, q=5)
        with pytest.raises(IllPosed, match="constrained"):
            solve_unconstrained(pt)

    def test_zero_covariate_component_is_singular(self):
        rng = np.random.default_rng(9)
        X, Y, _, x0 = random_problem(rng, p=3, q=40)
        x0[1] = 0.0
        pt = build_point(fit_ols(Dataset(X, Y)), x0)
        with pytest.raises(IllPosed):
            solve_unconstrained(pt)
        # the box rule still works
        sol = solve_constrained(pt, M=10.0)
        assert sol.kkt_residual <= 1e-8


class TestSolveConstrained:
    def test_inactive_box_equals_unconstrained(self):
        for seed in range(10):
            _, pt, _ = _point(seed)
            free = solve_unconstrained(pt)
            if np.any(free.theta[1:] <= 0):
                continue
            boxed = solve_constrained(pt, M=1e6)
            np.testing.assert_allclose(boxed.theta, free.theta, atol=1e-8)

    @pytest.mark.parametrize("M", [0.5, 3.0, 100.0])
    def test_intercept_only(self, M):
        y = np.array([1.0, 2.0, 6.0, 0.5])
        pt = make_point(np.zeros(0), np.zeros((0, 4)), np.zeros((0, 0)), np.ones(4))
        # with no features the target is free; plant one directly
        pt = dataclasses.replace(pt, y0_hat=y, xty=np.array([y.sum()]), yty=float(y @ y))
        sol = solve_constrained(pt, M=M)
        assert sol.theta[0] == pytest.approx(np.clip(y.mean(), -M, M))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_enumeration(self, seed):
        _, pt, _ = _point(seed, p=3, noise=2.0)
        M = 2.0
        sol = solve_constrained(pt, M=M)
        A, b, _ = explicit_quadratic(pt)
        lo, hi = box_bounds(pt.p, M)
        ref = active_set_enumeration(A, b, lo, hi)
        np.testing.assert_allclose(sol.theta, ref, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 1e6))
    def test_kkt_and_feasibility(self, seed, M):
        _, pt, _ = _point(seed, noise=3.0)
        sol = solve_constrained(pt, M=M)
        assert -M <= sol.theta[0] <= M
        assert np.all((sol.theta[1:] >= 0) & (sol.theta[1:] <= M))
        g = empirical_risk_gradient(pt, sol.theta)
        lo, hi = box_bounds(pt.p, M)
        scale = 1 + np.max(np.abs(pt.xty - pt.q * pt.q_vec)) / pt.q
        for j in range(pt.p + 1):
            if sol.theta[j] <= lo[j]:
                assert g[j] >= -1e-8 * scale
            elif sol.theta[j] >= hi[j]:
                assert g[j] <= 1e-8 * scale
            else:
                assert abs(g[j]) <= 1e-8 * scale

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1.0, 1e6))
    def test_dominates_ols_weights(self, seed, M):
        _, pt, _ = _point(seed, noise=3.0)
        sol = solve_constrained(pt, M=M)
        assert sol.empirical_risk <= empirical_risk(pt, ols_theta(pt.p)) + 1e-10

    def test_warm_start_never_worse(self):
        _, pt, _ = _point(10, noise=2.0)
        start = np.random.default_rng(1).normal(scale=3, size=pt.p + 1)
        lo, hi = box_bounds(pt.p, 2.0)
        sol = solve_constrained(pt, M=2.0, warm_start=start)
        assert sol.empirical_risk <= empirical_risk(pt, np.clip(start, lo, hi)) + 1e-12

    def test_invalid_bound(self):
        _, pt, _ = _point(11)
        with pytest.raises(InvalidBound):
            solve_constrained(pt, M=0.0)

    def test_no_convergence_carries_iterate(self):
        _, pt, _ = _point(12, p=5, noise=3.0)
        start = np.full(pt.p + 1, 0.3)
        with pytest.raises(NoConvergence) as info:
            solve_constrained(pt, M=1.0, max_iter=0, warm_start=start)
        assert info.value.solution is not None
        np.testing.assert_array_equal(info.value.solution.theta, start)


class TestPredict:
    def test_ols_rule_is_plain_prediction(self):
        fit, pt, _ = _point(13)
        np.testing.assert_array_equal(predict_point(fit, pt.x0, "ols"), pt.y0_hat)

    def test_constrained_rule_applies_weights(self):
        fit, pt, _ = _point(14, noise=2.0)
        theta = solve_constrained(pt, M=1.0).theta
        np.testing.assert_allclose(predict_point(fit, pt.x0, "constrained", M=1.0), pt.x_tilde @ theta, atol=1e-12)

    def test_batch_matches_points_and_threads(self):
        rng = np.random.default_rng(15)
        X, Y, _, _ = random_problem(rng, p=3, q=80)
        fit = fit_ols(Dataset(X, Y))
        X0 = rng.standard_normal((6, 3))
        for rule in ("ols", "unconstrained", "constrained"):
            batch = predict(fit, X0, rule)
            rows = np.vstack([predict_point(fit, x, rule) for x in X0])
            np.testing.assert_allclose(batch, rows, atol=1e-12)
            np.testing.assert_array_equal(predict(fit, X0, rule, threads=3), batch)

    def test_unknown_rule(self):
        fit, pt, _ = _point(16)
        with pytest.raises(ValueError):
            predict_point(fit, pt.x0, "lasso")


class TestTrueLossAndOracles:
    def test_zero_theta(self):
        _, pt, B = _point(17)
        assert true_loss(pt, B, np.zeros(pt.p + 1)) == pytest.approx(np.mean((B.T @ pt.x0) ** 2))

    def test_matches_summation(self):
        _, pt, B = _point(18, q=50)
        theta = np.random.default_rng(2).normal(size=pt.p + 1)
        total = 0.0
        for k in range(pt.q):
            mu = sum(pt.x0[j] * B[j, k] for j in range(pt.p))
            pred = theta[0] + sum(pt.x0[j] * pt.B_hat[j, k] * theta[j + 1] for j in range(pt.p))
            total += (mu - pred) ** 2
        assert true_loss(pt, B, theta) == pytest.approx(total / pt.q, rel=1e-12)

    def test_noiseless(self):
        rng = np.random.default_rng(19)
        X, _, B, x0 = random_problem(rng, p=3, q=40)
        pt = build_point(fit_ols(Dataset(X, X @ B)), x0)
        assert true_loss(pt, B, ols_theta(3)) <= 1e-20
        np.testing.assert_allclose(oracle_unconstrained(pt, B).theta, solve_unconstrained(pt).theta, atol=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1.0, 1e3))
    def test_oracles_beat_ols(self, seed, M):
        _, pt, B = _point(seed, noise=2.0)
        ols_loss = true_loss(pt, B, ols_theta(pt.p))
        star = oracle_unconstrained(pt, B)
        assert star.objective <= ols_loss + 1e-12
        boxed = oracle_constrained(pt, B, M=M)
        assert boxed.objective <= ols_loss + 1e-12
        assert boxed.mode is SolveMode.ORACLE_CONSTRAINED

    def test_loss_gap_is_quadratic_form(self):
        _, pt, B = _point(20, noise=2.0)
        u = solve_unconstrained(pt).theta
        s = oracle_unconstrained(pt, B).theta
        d = u - s
        gap = true_loss(pt, B, u) - true_loss(pt, B, s)
        assert gap == pytest.approx(d @ pt.gram @ d / pt.q, rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    X, Y, _, x0 = random_problem(rng, noise=2.0)
    perm = rng.permutation(Y.shape[1])
    pt = build_point(fit_ols(Dataset(X, Y)), x0)
    pt_perm = build_point(fit_ols(Dataset(X, Y[:, perm])), x0)
    np.testing.assert_allclose(pt_perm.y0_hat, pt.y0_hat[perm], atol=1e-12)
    np.testing.assert_allclose(pt_perm.x_tilde, pt.x_tilde[perm], atol=1e-12)
    np.testing.assert_allclose(solve_unconstrained(pt_perm).theta, solve_unconstrained(pt).theta, atol=1e-10)
    np.testing.assert_allclose(solve_constrained(pt_perm, M=5.0).theta, solve_constrained(pt, M=5.0).theta, atol=1e-10)

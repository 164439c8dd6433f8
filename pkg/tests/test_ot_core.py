"""Transport core: frozen examples, the brute-force oracle, and the solver
properties (oracle agreement, feasibility, symmetry, monotonicity, gradient
correctness, scale covariance)."""

import numpy as np
import pytest

from helpers import central_diff, rel_err
from otda.errors import (
    ContractViolationError,
    NumericOverflowError,
    SinkhornConvergenceError,
    UnsupportedInstanceError,
)
from otda.ot_core import (
    EUCLIDEAN,
    SQUARED_EUCLIDEAN,
    CostMatrix,
    DiscreteDistribution,
    SinkhornConfig,
    cost_matrix,
    entropy,
    exact_ot_bruteforce,
    marginal_residual,
    ot_value_and_point_grads,
    sinkhorn,
)


def uniform_pair(rng, n, d=8, m=None):
    src = DiscreteDistribution.uniform(rng.standard_normal((n, d)))
    tgt = DiscreteDistribution.uniform(rng.standard_normal((m or n, d)))
    return src, tgt


def tight_config(epsilon, tol=1e-9, cap=200000):
    return SinkhornConfig(epsilon=epsilon, relative_epsilon=False, max_iterations=cap, marginal_tolerance=tol)


class TestDiscreteDistribution:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ContractViolationError):
            DiscreteDistribution(np.zeros((2, 2)), np.array([0.5, 0.6]))

    def test_negative_weight_rejected(self):
        with pytest.raises(ContractViolationError):
            DiscreteDistribution(np.zeros((2, 2)), np.array([1.1, -0.1]))

    def test_nonfinite_point_rejected(self):
        with pytest.raises(ContractViolationError):
            DiscreteDistribution(np.array([[np.inf, 0.0]]), np.array([1.0]))


class TestCostMatrix:
    def test_three_four_five_triangle(self):
        src = DiscreteDistribution.uniform(np.array([[0.0, 0.0]]))
        tgt = DiscreteDistribution.uniform(np.array([[3.0, 4.0]]))
        assert cost_matrix(src, tgt, EUCLIDEAN).entries[0, 0] == pytest.approx(5.0)

    def test_identical_points_zero_diagonal(self):
        pts = np.random.default_rng(0).standard_normal((4, 3))
        dist = DiscreteDistribution.uniform(pts)
        for metric in (EUCLIDEAN, SQUARED_EUCLIDEAN):
            entries = cost_matrix(dist, dist, metric).entries
            assert np.allclose(np.diag(entries), 0.0)

    def test_hand_computed_squared_euclidean(self):
        src = DiscreteDistribution.uniform(np.array([[0.0, 0.0], [1.0, 0.0]]))
        tgt = DiscreteDistribution.uniform(np.array([[0.0, 1.0], [2.0, 0.0]]))
        entries = cost_matrix(src, tgt, SQUARED_EUCLIDEAN).entries
        assert np.allclose(entries, [[1.0, 4.0], [2.0, 1.0]])

    def test_swap_transpose_symmetry(self):
        rng = np.random.default_rng(1)
        src, tgt = uniform_pair(rng, 3, d=4, m=5)
        fwd = cost_matrix(src, tgt).entries
        back = cost_matrix(tgt, src).entries
        assert np.allclose(fwd, back.T)

    def test_dimension_mismatch(self):
        src = DiscreteDistribution.uniform(np.zeros((2, 3)))
        tgt = DiscreteDistribution.uniform(np.zeros((2, 4)))
        with pytest.raises(ContractViolationError):
            cost_matrix(src, tgt)


class TestEntropy:
    def test_single_atom(self):
        assert entropy(np.array([[1.0]])) == 0.0

    def test_uniform_two_by_two(self):
        assert entropy(np.full((2, 2), 0.25)) == pytest.approx(np.log(4.0), abs=1e-12)

    def test_zero_entries_contribute_nothing(self):
        assert entropy(np.array([[0.5, 0.0], [0.0, 0.5]])) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_negative_entry_rejected(self):
        with pytest.raises(ContractViolationError):
            entropy(np.array([[-0.1, 1.1]]))


class TestBruteForce:
    def test_zero_diagonal_identity_matching(self):
        src = DiscreteDistribution.uniform(np.zeros((2, 1)))
        cost = CostMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]), EUCLIDEAN)
        plan, value = exact_ot_bruteforce(cost, src, src)
        assert value == 0.0
        assert np.allclose(plan.gamma, [[0.5, 0.0], [0.0, 0.5]])

    def test_antidiagonal_matching(self):
        src = DiscreteDistribution.uniform(np.zeros((2, 1)))
        cost = CostMatrix(np.array([[2.0, 1.0], [1.0, 2.0]]), EUCLIDEAN)
        plan, value = exact_ot_bruteforce(cost, src, src)
        assert value == pytest.approx(1.0)
        assert np.allclose(plan.gamma, [[0.0, 0.5], [0.5, 0.0]])

    def test_single_pairing(self):
        src = DiscreteDistribution.uniform(np.zeros((1, 1)))
        _, value = exact_ot_bruteforce(CostMatrix(np.array([[7.0]]), EUCLIDEAN), src, src)
        assert value == pytest.approx(7.0)

    def test_rejects_nonuniform_weights(self):
        dist = DiscreteDistribution(np.zeros((2, 1)), np.array([0.7, 0.3]))
        cost = CostMatrix(np.zeros((2, 2)), EUCLIDEAN)
        with pytest.raises(UnsupportedInstanceError):
            exact_ot_bruteforce(cost, dist, dist)

    def test_rejects_large_instances(self):
        dist = DiscreteDistribution.uniform(np.zeros((9, 1)))
        cost = CostMatrix(np.zeros((9, 9)), EUCLIDEAN)
        with pytest.raises(UnsupportedInstanceError):
            exact_ot_bruteforce(cost, dist, dist)


class TestSinkhorn:
    def test_self_transport_is_near_free(self):
        rng = np.random.default_rng(2)
        pts = rng.standard_normal((6, 4))
        dist = DiscreteDistribution.uniform(pts)
        cost = cost_matrix(dist, dist)
        plan = sinkhorn(cost, dist, dist, tight_config(0.01, tol=1e-8))
        off_diagonal = cost.entries[~np.eye(6, dtype=bool)]
        assert plan.converged
        assert plan.value_cost <= 0.05 * off_diagonal.mean()

    def test_small_epsilon_matches_bruteforce(self):
        rng = np.random.default_rng(3)
        src, tgt = uniform_pair(rng, 4)
        cost = cost_matrix(src, tgt)
        _, best = exact_ot_bruteforce(cost, src, tgt)
        plan = sinkhorn(cost, src, tgt, tight_config(1e-3, tol=1e-6, cap=100000))
        assert plan.converged
        assert plan.value_cost == pytest.approx(best, rel=0.01)

    def test_large_epsilon_outer_product_limit(self):
        rng = np.random.default_rng(4)
        src, tgt = uniform_pair(rng, 5, m=4)
        cost = cost_matrix(src, tgt)
        config = tight_config(100.0 * cost.entries.max(), tol=1e-9, cap=10000)
        plan = sinkhorn(cost, src, tgt, config)
        assert np.abs(plan.gamma - np.outer(src.weights, tgt.weights)).max() <= 1e-3

    def test_linear_domain_agrees_with_log_domain(self):
        rng = np.random.default_rng(5)
        src, tgt = uniform_pair(rng, 4, d=3)
        cost = cost_matrix(src, tgt)
        log_plan = sinkhorn(cost, src, tgt, tight_config(0.5))
        lin_config = SinkhornConfig(
            epsilon=0.5, relative_epsilon=False, max_iterations=200000,
            marginal_tolerance=1e-9, log_domain=False,
        )
        lin_plan = sinkhorn(cost, src, tgt, lin_config)
        assert np.abs(log_plan.gamma - lin_plan.gamma).max() <= 1e-8
        assert log_plan.value_cost == pytest.approx(lin_plan.value_cost, abs=1e-9)

    def test_linear_domain_overflow_raises(self):
        rng = np.random.default_rng(6)
        src, tgt = uniform_pair(rng, 4, d=3)
        cost = cost_matrix(src, tgt)
        config = SinkhornConfig(
            epsilon=1e-6, relative_epsilon=False, max_iterations=100,
            marginal_tolerance=1e-9, log_domain=False,
        )
        with pytest.raises(NumericOverflowError, match="log_domain"):
            sinkhorn(cost, src, tgt, config)

    def test_nonconvergence_reported(self):
        rng = np.random.default_rng(7)
        src, tgt = uniform_pair(rng, 5)
        cost = cost_matrix(src, tgt)
        plan = sinkhorn(cost, src, tgt, SinkhornConfig(epsilon=0.01, max_iterations=1))
        assert not plan.converged
        assert plan.iterations_used == 1

    def test_converged_plans_are_feasible(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            src, tgt = uniform_pair(rng, int(rng.integers(3, 7)))
            cost = cost_matrix(src, tgt)
            # shipped cost-relative default epsilon, tightened tolerance
            config = SinkhornConfig(marginal_tolerance=1e-7, max_iterations=200000)
            plan = sinkhorn(cost, src, tgt, config)
            assert plan.converged
            row, col = marginal_residual(plan, src, tgt)
            assert row <= 1e-7 and col <= 1e-7

    def test_value_monotone_in_epsilon(self):
        rng = np.random.default_rng(9)
        src, tgt = uniform_pair(rng, 5)
        cost = cost_matrix(src, tgt)
        values = [
            sinkhorn(cost, src, tgt, tight_config(float(eps), tol=1e-9, cap=300000)).value_cost
            for eps in np.geomspace(1e-3, 1.0, 10)
        ]
        # feasibility rounding perturbs each value by O(n * tol * max cost)
        assert np.all(np.diff(values) >= -1e-7)

    def test_transposition_symmetry(self):
        rng = np.random.default_rng(10)
        src, tgt = uniform_pair(rng, 5, m=4)
        cost = cost_matrix(src, tgt)
        config = tight_config(0.05, tol=1e-12, cap=300000)
        fwd = sinkhorn(cost, src, tgt, config)
        back = sinkhorn(CostMatrix(cost.entries.T, cost.metric_tag), tgt, src, config)
        assert abs(fwd.value_cost - back.value_cost) <= 1e-9
        assert np.abs(fwd.gamma - back.gamma.T).max() <= 1e-9

    def test_scale_covariance(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((5, 4))
        Y = rng.standard_normal((5, 4))
        scale = 3.0
        for metric, power in ((EUCLIDEAN, 1.0), (SQUARED_EUCLIDEAN, 2.0)):
            src = DiscreteDistribution.uniform(X)
            tgt = DiscreteDistribution.uniform(Y)
            base = sinkhorn(cost_matrix(src, tgt, metric), src, tgt, tight_config(0.1, tol=1e-10))
            src_s = DiscreteDistribution.uniform(scale * X)
            tgt_s = DiscreteDistribution.uniform(scale * Y)
            scaled = sinkhorn(
                cost_matrix(src_s, tgt_s, metric), src_s, tgt_s,
                tight_config(0.1 * scale ** power, tol=1e-10),
            )
            assert scaled.value_cost == pytest.approx(base.value_cost * scale ** power, rel=1e-8)


class TestMarginalResidual:
    def test_permutation_plan_exact(self):
        src = DiscreteDistribution.uniform(np.zeros((3, 1)))
        gamma = np.eye(3) / 3
        plan_args = dict(dual_f=np.zeros(3), dual_g=np.zeros(3), value_cost=0.0,
                         value_regularized=0.0, iterations_used=0, converged=True)
        from otda.ot_core import TransportPlan

        plan = TransportPlan(gamma=gamma, **plan_args)
        assert marginal_residual(plan, src, src) == (0.0, 0.0)

    def test_outer_product_exact(self):
        from otda.ot_core import TransportPlan

        rng = np.random.default_rng(12)
        w = rng.random(4)
        w /= w.sum()
        src = DiscreteDistribution(np.zeros((4, 1)), w)
        tgt = DiscreteDistribution.uniform(np.zeros((3, 1)))
        plan = TransportPlan(np.outer(w, tgt.weights), np.zeros(4), np.zeros(3), 0.0, 0.0, 0, True)
        row, col = marginal_residual(plan, src, tgt)
        assert row <= 1e-12 and col <= 1e-12

    def test_zero_plan_residuals(self):
        from otda.ot_core import TransportPlan

        src = DiscreteDistribution.uniform(np.zeros((2, 1)))
        plan = TransportPlan(np.zeros((2, 2)), np.zeros(2), np.zeros(2), 0.0, 0.0, 0, False)
        assert marginal_residual(plan, src, src) == (0.5, 0.5)

    def test_shape_mismatch(self):
        from otda.ot_core import TransportPlan

        src = DiscreteDistribution.uniform(np.zeros((2, 1)))
        tgt = DiscreteDistribution.uniform(np.zeros((3, 1)))
        plan = TransportPlan(np.zeros((2, 2)), np.zeros(2), np.zeros(2), 0.0, 0.0, 0, False)
        with pytest.raises(ContractViolationError):
            marginal_residual(plan, src, tgt)


class TestPointGradients:
    @pytest.mark.parametrize("metric", [EUCLIDEAN, SQUARED_EUCLIDEAN])
    def test_matches_finite_differences(self, metric):
        rng = np.random.default_rng(13)
        config = tight_config(0.8, tol=1e-9)
        for _ in range(20):
            X = rng.standard_normal((int(rng.integers(3, 6)), 3))
            Y = rng.standard_normal((int(rng.integers(3, 6)), 3))
            _, grad_x, grad_y = ot_value_and_point_grads(X, Y, config, metric)
            fd_x = central_diff(lambda: ot_value_and_point_grads(X, Y, config, metric)[0], X)
            fd_y = central_diff(lambda: ot_value_and_point_grads(X, Y, config, metric)[0], Y)
            assert rel_err(grad_x, fd_x).max() <= 1e-4
            assert rel_err(grad_y, fd_y).max() <= 1e-4

    def test_self_coupling_gradients_tiny(self):
        rng = np.random.default_rng(14)
        X = rng.standard_normal((8, 5))
        config = tight_config(1e-3, tol=1e-9, cap=100000)
        value, grad_x, grad_y = ot_value_and_point_grads(X, X.copy(), config, EUCLIDEAN)
        assert abs(value) <= 0.01
        assert max(np.abs(grad_x).max(), np.abs(grad_y).max()) <= 1e-4

    def test_translation_identity(self):
        rng = np.random.default_rng(15)
        X = rng.standard_normal((6, 4))
        Y = rng.standard_normal((6, 4))
        shift = np.array([0.3, -0.2, 0.1, 0.5])
        config = tight_config(1.0, tol=1e-10)
        _, base, _ = ot_value_and_point_grads(X, Y, config, SQUARED_EUCLIDEAN)
        _, moved, _ = ot_value_and_point_grads(X, Y + shift, config, SQUARED_EUCLIDEAN)
        observed = moved.mean(axis=0) - base.mean(axis=0)
        assert np.abs(observed - (-2.0 * shift / 6.0)).max() <= 1e-7

    def test_nonconvergence_raises_with_diagnostics(self):
        rng = np.random.default_rng(16)
        X = rng.standard_normal((5, 3))
        Y = rng.standard_normal((5, 3))
        config = SinkhornConfig(epsilon=0.01, max_iterations=1)
        with pytest.raises(SinkhornConvergenceError) as info:
            ot_value_and_point_grads(X, Y, config)
        assert info.value.iterations_used == 1
        assert info.value.row_residual > 0

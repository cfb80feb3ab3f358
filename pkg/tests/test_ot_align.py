import logging
import unittest

import numpy as np

from core_math import derive_rng, l2_normalize_rows
from errors import BetaOutOfRange, NonFiniteInput, NonPositiveEpsilon, ShapeMismatch
from ot_align import TransportPlan, mixing_matrix, realign, regularized_objective, sinkhorn


def build_similarity(seed, B):
    return derive_rng(seed, "sim").uniform(-1.0, 1.0, size=(B, B))


class SinkhornTests(unittest.TestCase):
    def test_constant_matrix_gives_uniform_plan(self):
        plan = sinkhorn(np.full((4, 4), 0.3))
        np.testing.assert_allclose(plan.Q, np.full((4, 4), 1 / 16), atol=1e-12)
        self.assertTrue(plan.converged)

    def test_single_item(self):
        plan = sinkhorn(np.array([[0.7]]))
        np.testing.assert_array_equal(plan.Q, [[1.0]])
        self.assertEqual(plan.iterations_used, 0)

    def test_identity_similarity(self):
        plan = sinkhorn(np.eye(2), epsilon=0.05, max_iters=1000, tol=1e-10)
        self.assertAlmostEqual(plan.Q[0, 0], 0.5, places=4)
        self.assertAlmostEqual(plan.Q[1, 1], 0.5, places=4)
        self.assertLess(plan.Q[0, 1], 1e-4)
        self.assertLess(plan.Q[1, 0], 1e-4)

    def test_marginals_and_positivity(self):
        S = build_similarity(1, 8)
        plan = sinkhorn(S, epsilon=0.5, max_iters=1000, tol=1e-9)
        self.assertTrue(plan.converged)
        self.assertLess(plan.marginal_violation(), 1e-8)
        self.assertTrue(np.all(plan.Q > 0))

    def test_dual_is_monotone_and_meets_primal(self):
        S = build_similarity(2, 6)
        eps = 0.5
        plan = sinkhorn(S, epsilon=eps, max_iters=2000, tol=1e-12, track_objective=True)
        trace = np.asarray(plan.dual_trace)
        self.assertEqual(len(trace), plan.iterations_used)
        self.assertTrue(np.all(np.diff(trace) >= -1e-10))
        self.assertAlmostEqual(trace[-1], -regularized_objective(plan.Q, S, eps), places=8)

    def test_non_convergence_is_reported(self):
        S = build_similarity(3, 6)
        with self.assertLogs("ot_align", level="DEBUG") as logs:
            plan = sinkhorn(S, epsilon=0.01, max_iters=1, tol=1e-15)
        self.assertFalse(plan.converged)
        self.assertEqual(plan.iterations_used, 1)
        self.assertTrue(any("did not converge" in line for line in logs.output))
        self.assertFalse(any(record.levelno >= logging.WARNING for record in logs.records))

    def test_random_batches_at_default_epsilon(self):
        rng = derive_rng(0, "sinkhorn-batches")
        converged = 0
        for _ in range(100):
            B = int(rng.integers(2, 33))
            U = l2_normalize_rows(rng.normal(size=(B, 16)))
            V = l2_normalize_rows(rng.normal(size=(B, 16)))
            plan = sinkhorn(V @ U.T, epsilon=0.05, track_objective=True)
            self.assertTrue(np.all(np.isfinite(plan.Q)))
            self.assertTrue(np.all(np.diff(plan.dual_trace) >= -1e-10))
            if plan.converged:
                converged += 1
                self.assertLessEqual(plan.marginal_violation(), 1e-6)
        self.assertGreater(converged, 0)

    def test_errors(self):
        with self.assertRaises(NonPositiveEpsilon):
            sinkhorn(np.eye(2), epsilon=0.0)
        with self.assertRaises(ShapeMismatch):
            sinkhorn(np.ones((2, 3)))
        with self.assertRaises(NonFiniteInput):
            sinkhorn(np.array([[0.0, np.nan], [0.0, 0.0]]))


class RealignTests(unittest.TestCase):
    def test_beta_zero_is_identity(self):
        S = build_similarity(4, 5)
        plan = sinkhorn(S, epsilon=0.1)
        np.testing.assert_allclose(realign(S, plan, 0.0), S, atol=1e-15)

    def test_beta_one_with_identity_plan(self):
        S = build_similarity(5, 3)
        plan = TransportPlan(Q=np.eye(3) / 3, epsilon=0.05, iterations_used=1, converged=True)
        np.testing.assert_allclose(realign(S, plan, 1.0), S, atol=1e-12)

    def test_two_by_two_hand_case(self):
        S = np.array([[0.9, 0.1], [0.2, 0.8]])
        Q = np.array([[0.4, 0.1], [0.1, 0.4]])
        plan = TransportPlan(Q=Q, epsilon=0.05, iterations_used=1, converged=True)
        beta = 0.2
        M = np.array([[0.8 + 0.2 * 0.8, 0.2 * 0.2], [0.2 * 0.2, 0.8 + 0.2 * 0.8]])
        np.testing.assert_allclose(realign(S, plan, beta), M @ S, atol=1e-12)

    def test_rows_of_mixing_sum_to_one(self):
        plan = sinkhorn(build_similarity(6, 5), epsilon=0.5, max_iters=1000, tol=1e-10)
        M = mixing_matrix(plan, 0.7)
        np.testing.assert_allclose(M.sum(axis=1), np.ones(5), atol=1e-8)
        constant = np.full((5, 5), 0.4)
        np.testing.assert_allclose(realign(constant, plan, 0.7), constant, atol=1e-8)

    def test_literal_mixing(self):
        plan = sinkhorn(build_similarity(7, 4), epsilon=0.1)
        np.testing.assert_allclose(mixing_matrix(plan, 0.3, rescale=False), 0.7 * np.eye(4) + 0.3 * plan.Q)

    def test_linear_in_similarity(self):
        plan = sinkhorn(build_similarity(8, 4), epsilon=0.1)
        S1, S2 = build_similarity(9, 4), build_similarity(10, 4)
        left = realign(2.0 * S1 - 3.0 * S2, plan, 0.2)
        right = 2.0 * realign(S1, plan, 0.2) - 3.0 * realign(S2, plan, 0.2)
        np.testing.assert_allclose(left, right, atol=1e-12)

    def test_errors(self):
        plan = sinkhorn(build_similarity(11, 3))
        with self.assertRaises(BetaOutOfRange):
            realign(build_similarity(11, 3), plan, 1.2)
        with self.assertRaises(ShapeMismatch):
            realign(np.eye(4), plan, 0.2)


if __name__ == "__main__":
    unittest.main()

"""
Unit tests for unshuffle/regularizers.py
"""

import os
import sys
import unittest

import numpy as np
from scipy.special import expit

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tests.helpers import numeric_grad
from unshuffle.model import Batch, ForwardCache, head_logits, init_params, loss_bce
from unshuffle.regularizers import (
    RelDenominator,
    VarianceMode,
    grad_irmv1,
    grad_variance,
    head_stack,
    irmv1_penalty,
    mean_head,
    variance,
    variance_abs,
    variance_rel,
)


class TestMeanHead(unittest.TestCase):

    def test_identical_vectors(self):
        v = np.array([0.3, -1.2, 4.0])
        np.testing.assert_array_equal(mean_head([v, v, v]), v)

    def test_hand_values(self):
        np.testing.assert_allclose(mean_head([[1.0], [3.0]]), [2.0])
        np.testing.assert_allclose(mean_head([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5])

    def test_empty_stack_raises(self):
        with self.assertRaises(ValueError):
            mean_head(np.zeros((0, 3)))


class TestVariance(unittest.TestCase):
    """Test absolute and relative head variance."""

    def test_absolute_values(self):
        self.assertAlmostEqual(variance_abs([[1.0], [3.0]]), 1.0)
        self.assertAlmostEqual(variance_abs([[1.0, 1.0], [3.0, 3.0]]), 2.0)
        self.assertEqual(variance_abs([[2.0, -1.0]] * 4), 0.0)

    def test_relative_values(self):
        self.assertAlmostEqual(variance_rel([[1.0], [3.0]]), 5.0 / 9.0)
        self.assertAlmostEqual(variance_rel([[1.0, 1.0], [3.0, 3.0]]), 5.0 / 18.0)
        self.assertEqual(variance_rel([[2.0, -1.0]] * 3), 0.0)

    def test_relative_is_scale_invariant(self):
        stack = np.random.default_rng(0).normal(size=(4, 5))
        self.assertAlmostEqual(variance_rel(stack), variance_rel(10.0 * stack), places=12)

    def test_absolute_scales_quadratically(self):
        stack = np.random.default_rng(1).normal(size=(3, 6))
        for c in (0.5, -2.0, 7.0):
            self.assertAlmostEqual(variance_abs(c * stack), c * c * variance_abs(stack), places=10)

    def test_coordinate_permutation_invariance(self):
        rng = np.random.default_rng(2)
        stack = rng.normal(size=(4, 7))
        order = rng.permutation(7)
        self.assertAlmostEqual(variance_abs(stack[:, order]), variance_abs(stack), places=12)
        self.assertAlmostEqual(variance_rel(stack[:, order]), variance_rel(stack), places=12)

    def test_matches_elementwise_loops(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n_envs, dim = int(rng.integers(2, 6)), int(rng.integers(1, 8))
            stack = rng.normal(size=(n_envs, dim))
            center = [sum(stack[e][j] for e in range(n_envs)) / n_envs for j in range(dim)]
            sq_dev = [sum((stack[e][j] - center[j]) ** 2 for j in range(dim)) for e in range(n_envs)]
            l1 = [sum(abs(x) for x in stack[e]) for e in range(n_envs)]
            expected_abs = sum(sq_dev) / n_envs
            expected_rel = sum(sq_dev[e] / l1[e] ** 2 for e in range(n_envs)) / n_envs
            self.assertAlmostEqual(variance_abs(stack), expected_abs, delta=1e-10)
            self.assertAlmostEqual(variance_rel(stack), expected_rel, delta=1e-10)

    def test_single_head_raises(self):
        with self.assertRaises(ValueError):
            variance_abs([[1.0, 2.0]])

    def test_zero_head_named_in_error(self):
        with self.assertRaises(ValueError) as ctx:
            variance_rel([[1.0, 2.0], [0.0, 0.0]])
        self.assertIn("head 1", str(ctx.exception))

    def test_dispatch(self):
        stack = [[1.0], [3.0]]
        self.assertEqual(variance(stack, VarianceMode.ABSOLUTE), variance_abs(stack))
        self.assertEqual(variance(stack, "relative"), variance_rel(stack))

    def test_head_stack_layout(self):
        params = init_params(2, [3], 2, 2, 2, seed=0)
        params.heads[1].bias[...] = [7.0, 8.0]
        stack = head_stack(params)
        self.assertEqual(stack.shape, (2, 2 * 2 + 2))
        np.testing.assert_array_equal(stack[1, :4], params.heads[1].weights.ravel())
        np.testing.assert_array_equal(stack[1, 4:], [7.0, 8.0])


class TestVarianceGradient(unittest.TestCase):
    """Test analytic variance gradients against finite differences."""

    def _check(self, mode, rel_denominator=RelDenominator.L1):
        stack = np.random.default_rng(4).normal(size=(3, 4)) + 0.5
        analytic = grad_variance(stack, mode, rel_denominator)
        numeric = numeric_grad(lambda: variance(stack, mode, rel_denominator), stack, eps=1e-6)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-9)

    def test_absolute(self):
        self._check(VarianceMode.ABSOLUTE)

    def test_relative_l1(self):
        self._check(VarianceMode.RELATIVE)

    def test_relative_l2(self):
        self._check(VarianceMode.RELATIVE, RelDenominator.L2)

    def test_identical_heads_have_zero_gradient(self):
        stack = np.tile([1.0, -2.0, 0.5], (4, 1))
        np.testing.assert_array_equal(grad_variance(stack, VarianceMode.ABSOLUTE), np.zeros((4, 3)))

    def test_two_scalar_heads(self):
        np.testing.assert_allclose(grad_variance([[1.0], [3.0]], VarianceMode.ABSOLUTE), [[-1.0], [1.0]])


class TestIRMv1(unittest.TestCase):
    """Test the IRMv1 penalty and its gradient."""

    def setUp(self):
        rng = np.random.default_rng(2)
        self.params = init_params(3, [4], 3, 2, 1, seed=1, activation="tanh")
        for _, tensor in self.params.tensors():
            tensor[...] = rng.normal(scale=0.5, size=tensor.shape)
        self.batches = [
            Batch(rng.normal(size=(5, 3)), rng.integers(0, 2, size=5)),
            Batch(rng.normal(size=(7, 3)), rng.integers(0, 2, size=7)),
        ]

    def test_gradient_matches_finite_differences(self):
        value, grads = grad_irmv1(self.params, self.batches)
        self.assertAlmostEqual(value, irmv1_penalty(self.params, self.batches), places=12)
        for (name, tensor), (_, analytic) in zip(self.params.tensors(), grads.tensors()):
            numeric = numeric_grad(lambda: irmv1_penalty(self.params, self.batches), tensor)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-9, err_msg=name)

    def test_penalty_is_squared_scale_derivative(self):
        eps = 1e-5
        expected = 0.0
        for batch in self.batches:
            logits = head_logits(self.params, 0, batch, ForwardCache())

            def scaled_loss(s):
                return loss_bce(expit(s * logits), batch.labels)

            expected += ((scaled_loss(1.0 + eps) - scaled_loss(1.0 - eps)) / (2 * eps)) ** 2
        self.assertAlmostEqual(irmv1_penalty(self.params, self.batches), expected, delta=1e-8)

    def test_penalty_is_non_negative(self):
        self.assertGreaterEqual(irmv1_penalty(self.params, self.batches), 0.0)

    def test_zero_logits_balanced_labels_are_stationary(self):
        params = self.params.zeros_like()
        batch = Batch(np.ones((4, 3)), np.array([0, 1, 0, 1]))
        self.assertEqual(irmv1_penalty(params, [batch]), 0.0)

    def test_unequal_heads_raise(self):
        params = init_params(3, [4], 3, 2, 2, seed=0)
        params.heads[1].bias[...] = 1.0
        with self.assertRaises(ValueError):
            irmv1_penalty(params, self.batches)


if __name__ == "__main__":
    unittest.main()

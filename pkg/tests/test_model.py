"""
Unit tests for unshuffle/model.py

Covers initialization, the forward pass, the BCE loss and the analytic
gradients (checked against central finite differences).
"""

import math
import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tests.helpers import numeric_grad
from unshuffle.model import (
    MERGED,
    Batch,
    HeadParams,
    forward,
    grad_model,
    init_params,
    load_params,
    loss_bce,
    save_params,
)


def _loss(params, env, batch):
    return loss_bce(forward(params, env, batch), batch.labels)


class TestInitParams(unittest.TestCase):
    """Test model initialization."""

    def test_heads_start_identical(self):
        params = init_params(2, [4], 3, 2, 2, seed=7)
        np.testing.assert_array_equal(params.heads[0].weights, params.heads[1].weights)
        np.testing.assert_array_equal(params.heads[0].bias, params.heads[1].bias)
        self.assertIsNone(params.merged)

    def test_same_seed_is_bit_identical(self):
        a = init_params(2, [4], 3, 2, 2, seed=7)
        b = init_params(2, [4], 3, 2, 2, seed=7)
        for (name, x), (_, y) in zip(a.tensors(), b.tensors()):
            np.testing.assert_array_equal(x, y, err_msg=name)

    def test_different_seed_changes_extractor(self):
        a = init_params(2, [4], 3, 2, 2, seed=7)
        b = init_params(2, [4], 3, 2, 2, seed=8)
        self.assertFalse(np.array_equal(a.extractor.layers[0][0], b.extractor.layers[0][0]))

    def test_biases_are_zero(self):
        params = init_params(5, [6, 4], 3, 2, 3, seed=1)
        for _, bias in params.extractor.layers:
            self.assertTrue(np.all(bias == 0.0))

    def test_invalid_dimension_rejected(self):
        with self.assertRaises(ValueError):
            init_params(0, [4], 3, 2, 1, seed=0)
        with self.assertRaises(ValueError):
            init_params(2, [0], 3, 2, 1, seed=0)
        with self.assertRaises(ValueError):
            init_params(2, [4], 3, 2, 0, seed=0)


class TestForward(unittest.TestCase):
    """Test the forward pass."""

    def test_zero_params_give_one_half(self):
        params = init_params(3, [4], 2, 2, 1, seed=0).zeros_like()
        probs = forward(params, 0, np.ones((5, 3)))
        np.testing.assert_array_equal(probs, np.full((5, 2), 0.5))

    def test_merged_of_equal_heads_matches_each_head(self):
        params = init_params(3, [4], 2, 2, 3, seed=0)
        head = params.heads[1]
        params.merged = HeadParams(head.weights.copy(), head.bias.copy(), env_id=-1)
        x = np.random.default_rng(0).normal(size=(6, 3))
        np.testing.assert_array_equal(forward(params, 2, x), forward(params, MERGED, x))

    def test_matches_straight_line_computation(self):
        params = init_params(3, [5], 4, 2, 1, seed=3, activation="tanh")
        rng = np.random.default_rng(1)
        for _, tensor in params.tensors():
            tensor[...] = rng.normal(scale=0.5, size=tensor.shape)
        x = rng.normal(size=(3, 3))

        (w1, b1), (w2, b2) = params.extractor.layers
        head = params.heads[0]
        expected = np.zeros((3, 2))
        for i in range(3):
            hidden = [math.tanh(sum(w1[j, k] * x[i, k] for k in range(3)) + b1[j]) for j in range(5)]
            feats = [math.tanh(sum(w2[j, k] * hidden[k] for k in range(5)) + b2[j]) for j in range(4)]
            for c in range(2):
                z = sum(head.weights[c, k] * feats[k] for k in range(4)) + head.bias[c]
                expected[i, c] = 1.0 / (1.0 + math.exp(-z))
        np.testing.assert_allclose(forward(params, 0, x), expected, rtol=0, atol=1e-12)

    def test_merged_before_merge_raises(self):
        params = init_params(3, [4], 2, 2, 2, seed=0)
        with self.assertRaises(ValueError):
            forward(params, MERGED, np.zeros((1, 3)))

    def test_dimension_mismatch_raises(self):
        params = init_params(3, [4], 2, 2, 1, seed=0)
        with self.assertRaises(ValueError):
            forward(params, 0, np.zeros((2, 4)))

    def test_outputs_in_open_interval(self):
        params = init_params(3, [4], 2, 2, 1, seed=0)
        probs = forward(params, 0, np.random.default_rng(2).normal(scale=100.0, size=(20, 3)))
        self.assertTrue(np.all(probs > 0.0) and np.all(probs < 1.0))


class TestLoss(unittest.TestCase):
    """Test the binary cross-entropy."""

    def test_one_half_gives_ln2(self):
        self.assertAlmostEqual(loss_bce(np.full((4, 3), 0.5), np.array([0, 1, 2, 1])), math.log(2), places=12)

    def test_hand_computed_value(self):
        value = loss_bce(np.array([[0.8, 0.3]]), np.array([[1.0, 0.0]]))
        self.assertAlmostEqual(value, (-math.log(0.8) - math.log(0.7)) / 2, places=12)
        self.assertAlmostEqual(value, 0.2899, places=4)

    def test_perfect_prediction_is_near_zero(self):
        self.assertLess(loss_bce(np.array([[1.0, 0.0]]), np.array([0])), 1e-6)

    def test_shape_mismatch_raises(self):
        with self.assertRaises(ValueError):
            loss_bce(np.full((2, 2), 0.5), np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


class TestGradients(unittest.TestCase):
    """Test analytic gradients against finite differences."""

    def setUp(self):
        rng = np.random.default_rng(11)
        self.params = init_params(3, [4], 3, 2, 2, seed=5, activation="tanh")
        for _, tensor in self.params.tensors():
            tensor[...] = rng.normal(scale=0.4, size=tensor.shape)
        self.batch = Batch(rng.normal(size=(6, 3)), rng.integers(0, 2, size=6))

    def test_matches_finite_differences(self):
        grads = grad_model(self.params, 1, self.batch)
        for (name, tensor), (_, analytic) in zip(self.params.tensors(), grads.tensors()):
            numeric = numeric_grad(lambda: _loss(self.params, 1, self.batch), tensor)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8, err_msg=name)

    def test_other_heads_get_zero_gradient(self):
        grads = grad_model(self.params, 1, self.batch)
        self.assertTrue(np.all(grads.heads[0].weights == 0.0))
        self.assertTrue(np.all(grads.heads[0].bias == 0.0))

    def test_multi_hot_labels(self):
        labels = np.array([[1.0, 0.5], [0.0, 1.0], [0.3, 0.3], [1.0, 1.0], [0.0, 0.0], [0.6, 0.2]])
        batch = Batch(self.batch.features, labels)
        grads = grad_model(self.params, 0, batch)
        head = self.params.heads[0].weights
        numeric = numeric_grad(lambda: _loss(self.params, 0, batch), head)
        np.testing.assert_allclose(grads.heads[0].weights, numeric, rtol=1e-4, atol=1e-8)

    def test_duplicated_example_gives_same_gradient(self):
        single = Batch(self.batch.features[:1], self.batch.labels[:1])
        repeated = Batch(np.repeat(self.batch.features[:1], 4, axis=0), np.repeat(self.batch.labels[:1], 4))
        for (_, a), (_, b) in zip(grad_model(self.params, 0, single).tensors(), grad_model(self.params, 0, repeated).tensors()):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_stationary_linear_model_has_zero_head_gradient(self):
        params = init_params(1, [], 1, 1, 1, seed=0, activation="identity")
        params.extractor.layers[0][0][...] = 1.0
        params.heads[0].weights[...] = 0.0
        params.heads[0].bias[...] = 0.0
        # p = 0.5 everywhere and half the labels are positive
        batch = Batch(np.array([[1.0], [1.0], [-1.0], [-1.0]]), np.array([[1.0], [0.0], [1.0], [0.0]]))
        grads = grad_model(params, 0, batch)
        np.testing.assert_allclose(grads.heads[0].weights, 0.0, atol=1e-15)
        np.testing.assert_allclose(grads.heads[0].bias, 0.0, atol=1e-15)


class TestSerialization(unittest.TestCase):
    """Test model files."""

    def test_save_and_load(self):
        params = init_params(3, [4], 2, 2, 2, seed=0)
        params.merged = HeadParams(params.heads[0].weights.copy(), params.heads[0].bias.copy(), env_id=-1)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_params(params, os.path.join(tmp, "model.json"))
            loaded = load_params(path)
        x = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(forward(params, MERGED, x), forward(loaded, MERGED, x))

    def test_unknown_version_rejected(self):
        from unshuffle.model import params_from_dict, params_to_dict

        data = params_to_dict(init_params(3, [4], 2, 2, 1, seed=0))
        data["version"] = 99
        with self.assertRaises(ValueError):
            params_from_dict(data)


if __name__ == "__main__":
    unittest.main()

"""
Unit tests for unshuffle/optimizer.py

AdaDelta, head merging, the training configuration and short end-to-end
training runs on tiny datasets.
"""

import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tests.helpers import toy_dataset
from unshuffle.model import MERGED, init_params
from unshuffle.optimizer import (
    AdaDeltaState,
    MergeMode,
    Objective,
    RunReport,
    TrainConfig,
    TrainingDivergedError,
    adadelta_step,
    merge_heads,
    train,
)
from unshuffle.regularizers import head_stack, variance_abs


def small_config(**changes):
    base = dict(hidden_dims=[4], feature_dim=3, batch_size=16, max_epochs=4, patience=10, seed=3)
    base.update(changes)
    return TrainConfig(**base)


class TestAdaDelta(unittest.TestCase):
    """Test the AdaDelta update rule."""

    def test_zero_gradient_gives_zero_update(self):
        param = np.array([1.0, -2.0])
        state = AdaDeltaState.zeros_like([param])
        adadelta_step(state, [param], [np.zeros(2)])
        np.testing.assert_array_equal(param, [1.0, -2.0])

    def test_matches_step_by_step_transcript(self):
        rho, eps, g = 0.95, 1e-6, 0.3
        param = np.array([0.0])
        state = AdaDeltaState.zeros_like([param], rho=rho, eps=eps)
        x, eg2, edx2 = 0.0, 0.0, 0.0
        for _ in range(50):
            adadelta_step(state, [param], [np.array([g])])
            eg2 = rho * eg2 + (1 - rho) * g * g
            dx = -((edx2 + eps) ** 0.5) / ((eg2 + eps) ** 0.5) * g
            edx2 = rho * edx2 + (1 - rho) * dx * dx
            x += dx
        self.assertAlmostEqual(param[0], x, delta=1e-12)
        self.assertAlmostEqual(state.sq_update[0][0], edx2, delta=1e-12)

    def test_non_finite_gradient_names_tensor(self):
        param = np.zeros(2)
        state = AdaDeltaState.zeros_like([param])
        with self.assertRaises(TrainingDivergedError) as ctx:
            adadelta_step(state, [param], [np.array([0.0, np.nan])], names=["head.1.bias"])
        self.assertIn("head.1.bias", str(ctx.exception))

    def test_mask_leaves_tensor_and_state_untouched(self):
        a, b = np.ones(2), np.ones(2)
        state = AdaDeltaState.zeros_like([a, b])
        adadelta_step(state, [a, b], [np.ones(2), np.ones(2)], mask=[False, True])
        np.testing.assert_array_equal(a, [1.0, 1.0])
        np.testing.assert_array_equal(state.sq_grad[0], [0.0, 0.0])
        self.assertTrue(np.all(b < 1.0))


class TestMergeHeads(unittest.TestCase):
    """Test merging per-environment heads into one classifier."""

    def _params(self, biases):
        params = init_params(2, [2], 1, 1, len(biases), seed=0)
        for head, value in zip(params.heads, biases):
            head.weights[...] = value
            head.bias[...] = value
        return params

    def test_mean(self):
        merged = merge_heads(self._params([1.0, 3.0]), MergeMode.MEAN).merged
        np.testing.assert_allclose(merged.bias, [2.0])
        self.assertEqual(merged.env_id, -1)

    def test_median(self):
        merged = merge_heads(self._params([1.0, 2.0, 10.0]), MergeMode.MEDIAN).merged
        np.testing.assert_allclose(merged.weights, [[2.0]])

    def test_equal_heads(self):
        params = init_params(2, [2], 3, 2, 3, seed=0)
        for mode in MergeMode:
            merged = merge_heads(params, mode).merged
            np.testing.assert_allclose(merged.weights, params.heads[0].weights)


class TestTrainConfig(unittest.TestCase):
    """Test configuration validation and serialization."""

    def test_lambda_key(self):
        config = TrainConfig(lam=0.5)
        data = config.to_dict()
        self.assertEqual(data["lambda"], 0.5)
        self.assertNotIn("lam", data)
        self.assertEqual(TrainConfig.from_dict(data), config)

    def test_unknown_field_rejected(self):
        with self.assertRaises(ValueError):
            TrainConfig.from_dict({"lamda": 1.0})

    def test_invalid_values_name_field(self):
        with self.assertRaises(ValueError) as ctx:
            TrainConfig(batch_size=0)
        self.assertIn("batch_size", str(ctx.exception))
        with self.assertRaises(ValueError):
            TrainConfig(lam=-1.0)

    def test_replace(self):
        config = TrainConfig(lam=2.0).replace(lam=0.0, seed=4)
        self.assertEqual((config.lam, config.seed), (0.0, 4))

    def test_eq2_names_the_variance_objective(self):
        config = TrainConfig.from_dict({"objective": "eq2"})
        self.assertIs(config.objective, Objective.VARIANCE)
        self.assertEqual(TrainConfig.from_dict(config.to_dict()), config)
        with self.assertRaises(ValueError):
            TrainConfig(objective="eq3")


class TestTrain(unittest.TestCase):
    """Short training runs on tiny datasets."""

    @classmethod
    def setUpClass(cls):
        cls.env_a = toy_dataset(n=48, seed=1)
        cls.env_b = toy_dataset(n=48, seed=2)
        cls.val = toy_dataset(n=30, seed=3)

    def test_same_seed_is_reproducible(self):
        _, first = train(small_config(), [self.env_a, self.env_b], self.val)
        _, second = train(small_config(), [self.env_a, self.env_b], self.val)
        self.assertEqual(first.to_dict(), second.to_dict())

    def test_single_environment_matches_erm(self):
        _, multi_head = train(small_config(lam=5.0), [self.env_a], self.val)
        _, erm = train(small_config(lam=5.0, objective="erm"), [self.env_a], self.val)
        self.assertEqual(multi_head.to_dict()["epochs"], erm.to_dict()["epochs"])
        self.assertEqual(multi_head.best_val_acc, erm.best_val_acc)

    def test_identical_environments_keep_identical_heads(self):
        params, report = train(small_config(), [self.env_a, self.env_a], self.val)
        np.testing.assert_allclose(params.heads[0].weights, params.heads[1].weights, atol=1e-12)
        self.assertLess(report.final_variance, 1e-12)

    def test_result_has_merged_head(self):
        params, report = train(small_config(), [self.env_a, self.env_b], self.val)
        self.assertIsNotNone(params.merged)
        self.assertTrue(0.0 <= report.best_val_acc <= 100.0)
        self.assertTrue(0 <= report.best_epoch < 4)

    def test_large_lambda_pulls_heads_together(self):
        config = small_config(lam=1000.0, variance_mode="absolute", max_epochs=6)
        params, _ = train(config, [self.env_a, self.env_b], self.val)
        stack = head_stack(params)
        self.assertLessEqual(variance_abs(stack), 1e-3 * float(np.mean(np.sum(stack ** 2, axis=1))))

    def test_alternating_schedule_runs(self):
        config = small_config(alternating=True, warmup_epochs=1)
        _, report = train(config, [self.env_a, self.env_b], self.val)
        self.assertEqual(len(report.epochs[0].env_losses), 2)

    def test_irmv1_trains_one_head(self):
        params, _ = train(small_config(objective="irmv1", lam=1.0), [self.env_a, self.env_b], self.val)
        self.assertEqual(params.num_envs, 1)

    def test_ood_accuracy_reported(self):
        test = toy_dataset(n=20, seed=9)
        _, report = train(small_config(), [self.env_a, self.env_b], self.val, test)
        self.assertIsNotNone(report.best_ood_acc)
        self.assertEqual(list(report.trace_frame().columns),
                         ["epoch", "loss_env0", "loss_env1", "variance", "objective", "val_acc", "ood_acc"])

    def test_report_round_trip(self):
        _, report = train(small_config(max_epochs=2), [self.env_a, self.env_b], self.val)
        self.assertEqual(RunReport.from_dict(report.to_dict()), report)

    def test_empty_environment_rejected(self):
        with self.assertRaises(ValueError):
            train(small_config(), [self.env_a, None], self.val)

    def test_erm_with_two_environments_rejected(self):
        with self.assertRaises(ValueError):
            train(small_config(objective="erm"), [self.env_a, self.env_b], self.val)

    def test_merged_head_accuracy_matches_report(self):
        from unshuffle.evaluation import accuracy

        params, report = train(small_config(), [self.env_a, self.env_b], self.val)
        self.assertEqual(accuracy(params, MERGED, self.val), report.best_val_acc)


if __name__ == "__main__":
    unittest.main()

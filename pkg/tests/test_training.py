import os
import tempfile
import unittest
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from models.config_models import ModelConfig, SynthConfig, TrainConfig, minimal_decoder_stages
from models.hrtf_models import HRTFSet, make_explicit_grid
from models.sh_transformer import build
from nn.tensor import Tensor
from services.container_service import read_checkpoint
from services.dataset_service import DatasetEntry
from services.synth_service import generate_subject, make_sparse
from utils.exceptions import InsufficientDataError, InvalidArgumentError, TrainingDivergedError, UnsupportedTopologyError
from workflows.training_workflow import (
    LOSS_CURVE_COLUMNS,
    AdamOptimizer,
    TrainingWorkflow,
    adam_step,
    prepare_example,
    split_subjects,
)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(order_in=1, order_out=2, n_bins=4, d_model=8, n_heads=2, n_kv_groups=1, encoder_stages=1)
    base.update(overrides)
    base.setdefault('decoder_stages', minimal_decoder_stages(base['order_in'], base['order_out'],
                                                             base['encoder_stages']))
    return ModelConfig(**base)


def make_entries(count: int, level: int = 3):
    entries = []
    for seed in range(count):
        truth = generate_subject(SynthConfig(seed=seed, n_bins=4, n_az=8, n_el=4))
        entries.append(DatasetEntry(subject=f"s{seed}", ground_truth=truth, sparse=make_sparse(truth, level)))
    return entries


def train_config(**overrides) -> TrainConfig:
    base = dict(batch_size=1, lr=1e-2, epochs=3, seed=0, ridge_lambda=1e-2, val_fraction=0.0)
    base.update(overrides)
    return TrainConfig(**base)


class TestAdam(unittest.TestCase):
    """Test cases for the Adam update"""

    def test_first_step_moves_by_learning_rate(self):
        """Test the bias-corrected first step is -lr * sign(grad)"""
        param = np.array([1.0, -2.0, 0.5])
        grad = np.array([3.0, -0.2, 1e-3])
        updated, m, v = adam_step(param, grad, np.zeros(3), np.zeros(3), 1, lr=0.01)
        np.testing.assert_allclose(updated - param, -0.01 * np.sign(grad), rtol=1e-4)
        np.testing.assert_allclose(m, 0.1 * grad)
        np.testing.assert_allclose(v, 0.001 * grad * grad)

    def test_zero_gradient_leaves_parameters(self):
        param = np.array([0.3, 0.7])
        updated, _, _ = adam_step(param, np.zeros(2), np.zeros(2), np.zeros(2), 1, lr=0.1)
        np.testing.assert_array_equal(updated, param)

    def test_invalid_step_counter_and_shapes(self):
        with self.assertRaises(InvalidArgumentError):
            adam_step(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2), 0, lr=0.1)
        with self.assertRaises(InvalidArgumentError):
            adam_step(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), 1, lr=0.1)

    def test_optimizer_treats_missing_gradients_as_zero(self):
        weights = build(tiny_config()).trainable()
        before = {name: t.data.copy() for name, t in weights.parameters()}
        optimizer = AdamOptimizer(weights, train_config())
        weights['head.b'].grad = np.ones(4)
        optimizer.step()
        self.assertEqual(optimizer.t, 1)
        np.testing.assert_allclose(weights['head.b'].data, -0.01, rtol=1e-6)
        np.testing.assert_array_equal(weights['embed.w'].data, before['embed.w'])


class TestSplitSubjects(unittest.TestCase):
    """Test cases for the seeded train/validation split"""

    def test_split_sizes_and_disjointness(self):
        entries = make_entries(5)
        train, val = split_subjects(entries, 0.4, seed=1)
        self.assertEqual((len(train), len(val)), (3, 2))
        self.assertEqual(sorted(e.subject for e in train + val), [e.subject for e in entries])

    def test_split_is_deterministic(self):
        entries = make_entries(5)
        first = [e.subject for e in split_subjects(entries, 0.4, seed=7)[1]]
        second = [e.subject for e in split_subjects(entries, 0.4, seed=7)[1]]
        self.assertEqual(first, second)

    def test_one_training_subject_always_remains(self):
        entries = make_entries(2)
        train, val = split_subjects(entries, 0.9, seed=0)
        self.assertEqual((len(train), len(val)), (1, 1))

    def test_fraction_of_one_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            split_subjects(make_entries(2), 1.0, seed=0)


class TestTrainingWorkflow(unittest.TestCase):
    """Test cases for the epoch loop"""

    def setUp(self):
        self.cfg = tiny_config()
        self.entries = make_entries(2)

    def test_same_seed_reproduces_loss_curve(self):
        """Test two runs with identical inputs give identical histories"""
        first = TrainingWorkflow(self.cfg, train_config()).train(self.entries)
        second = TrainingWorkflow(self.cfg, train_config()).train(self.entries)
        self.assertEqual([r.model_dump() for r in first.history], [r.model_dump() for r in second.history])
        self.assertEqual(first.step, 6)

    def test_overfits_a_single_subject(self):
        result = TrainingWorkflow(self.cfg, train_config(epochs=25)).run(self.entries[:1])
        self.assertEqual(result.status, "success")
        self.assertLess(result.final_total, result.initial_total)

    def test_zero_learning_rate_keeps_weights(self):
        workflow = TrainingWorkflow(self.cfg, train_config(lr=0.0))
        state = workflow.train(self.entries)
        initial = build(self.cfg, seed=0)
        for name, tensor in workflow.weights.parameters():
            np.testing.assert_array_equal(tensor.data, initial[name].data)
        totals = [r.total for r in state.history]
        for total in totals:
            self.assertAlmostEqual(total, totals[0], places=10)

    def test_max_steps_stops_early(self):
        state = TrainingWorkflow(self.cfg, train_config(max_steps=1, epochs=5)).train(self.entries)
        self.assertEqual((state.step, state.epoch), (1, 1))

    def test_validation_rows_recorded(self):
        state = TrainingWorkflow(self.cfg, train_config(epochs=2)).train(self.entries[:1], self.entries[1:])
        self.assertEqual([(r.epoch, r.split) for r in state.history],
                         [(1, 'train'), (1, 'val'), (2, 'train'), (2, 'val')])
        val_totals = [r.total for r in state.history if r.split == 'val']
        self.assertEqual(state.best_total, min(val_totals))

    def test_resumes_from_given_weights(self):
        start = build(self.cfg, seed=9)
        workflow = TrainingWorkflow(self.cfg, train_config(), weights=start)
        np.testing.assert_array_equal(workflow.weights['embed.w'].data, start['embed.w'].data)
        self.assertIsNot(workflow.weights['embed.w'], start['embed.w'])

    def test_empty_training_set(self):
        workflow = TrainingWorkflow(self.cfg, train_config())
        with self.assertRaises(InsufficientDataError):
            workflow.train([])
        result = workflow.run([])
        self.assertEqual(result.status, "failed")
        self.assertTrue(result.errors)

    def test_non_finite_loss_diverges(self):
        """Test a NaN loss raises TrainingDivergedError naming the component"""
        def nan_terms(g_db, hr_db, neighbor_matrix, weights):
            nan = Tensor(np.nan, requires_grad=True)
            return nan, {'lsd': nan}

        workflow = TrainingWorkflow(self.cfg, train_config())
        with patch('workflows.training_workflow.loss_terms', side_effect=nan_terms):
            with self.assertRaises(TrainingDivergedError) as ctx:
                workflow.train(self.entries)
            self.assertEqual((ctx.exception.epoch, ctx.exception.batch, ctx.exception.component), (1, 0, 'lsd'))
            self.assertEqual(workflow.run(self.entries).status, "failed")

    def test_explicit_target_grid_needs_neighbor_free_preset(self):
        grid = make_explicit_grid([0.0, 90.0, 180.0, 270.0, 45.0], [0.0, 20.0, 0.0, -20.0, 60.0])
        truth = HRTFSet(grid=grid, sample_rate_hz=48000.0,
                        magnitudes=np.random.default_rng(0).uniform(0.5, 2.0, size=(5, 2, 4)))
        entry = DatasetEntry(subject='x', ground_truth=truth, sparse=make_sparse(truth, 3))
        with self.assertRaises(UnsupportedTopologyError):
            TrainingWorkflow(self.cfg, train_config(epochs=1)).train([entry])
        state = TrainingWorkflow(self.cfg, train_config(epochs=1, loss_preset='lsd_ild')).train([entry])
        self.assertEqual(state.epoch, 1)
        self.assertIsNone(state.history[0].ndl)

    def test_bin_count_must_match(self):
        with self.assertRaises(InvalidArgumentError):
            prepare_example(self.entries[0], tiny_config(n_bins=8), 1e-2)


class TestTrainingArtifacts(unittest.TestCase):
    """Test cases for checkpoints and the loss curve"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = os.path.join(self.tmp.name, 'model.hrc')
        self.cfg = tiny_config()
        self.entries = make_entries(2)

    def test_best_and_periodic_checkpoints(self):
        workflow = TrainingWorkflow(self.cfg, train_config(epochs=2, checkpoint_every=1), checkpoint_path=self.path,
                                    meta={'level': 3})
        result = workflow.run(self.entries)
        self.assertEqual(result.status, "success")
        for name in ('model.hrc', 'model_epoch0001.hrc', 'model_epoch0002.hrc', 'loss_curve.csv'):
            self.assertTrue(os.path.exists(os.path.join(self.tmp.name, name)), name)

        best = read_checkpoint(self.path)
        self.assertEqual(best.meta['level'], 3)
        self.assertEqual(best.meta['epoch'], result.best_epoch)
        self.assertEqual(best.meta['train_config']['epochs'], 2)
        self.assertEqual(best.weights.config, self.cfg)
        self.assertIsNotNone(best.adam_m)

        periodic = read_checkpoint(os.path.join(self.tmp.name, 'model_epoch0002.hrc'))
        self.assertEqual(periodic.step, 4)
        for name, tensor in workflow.weights.parameters():
            np.testing.assert_array_equal(periodic.weights[name].data, tensor.data)

    def test_loss_curve_matches_history(self):
        workflow = TrainingWorkflow(self.cfg, train_config(epochs=2), checkpoint_path=self.path)
        state = workflow.train(self.entries)
        frame = pd.read_csv(workflow.loss_curve_path())
        self.assertEqual(list(frame.columns), LOSS_CURVE_COLUMNS)
        self.assertEqual(list(frame['split']), ['train', 'train'])
        np.testing.assert_allclose(frame['total'].to_numpy(), [r.total for r in state.history], rtol=1e-14)
        self.assertNotIn('mse', frame.columns)

    def test_loss_curve_lists_mse_when_weighted(self):
        workflow = TrainingWorkflow(self.cfg, train_config(epochs=1, loss_preset='mse'), checkpoint_path=self.path)
        state = workflow.train(self.entries)
        frame = pd.read_csv(workflow.loss_curve_path())
        self.assertEqual(list(frame.columns), ['epoch', 'lsd', 'ild', 'ndl', 'mse', 'total', 'split'])
        self.assertAlmostEqual(frame['mse'].iloc[0], state.history[0].mse, places=10)
        self.assertAlmostEqual(frame['total'].iloc[0], frame['mse'].iloc[0], places=10)

    def test_no_files_without_checkpoint_path(self):
        workflow = TrainingWorkflow(self.cfg, train_config(epochs=1))
        workflow.train(self.entries)
        self.assertIsNone(workflow.loss_curve_path())
        self.assertIsNotNone(workflow.best_weights)
        self.assertEqual(os.listdir(self.tmp.name), [])


if __name__ == '__main__':
    pytest.main([__file__])

"""
Long-running end-to-end checks. Skipped unless HRTF_RUN_SLOW=1.
"""

import logging
import unittest

import pytest

from models.config_models import ModelConfig, SynthConfig, TrainConfig, default_fit_config
from services.dataset_service import DatasetEntry
from services.synth_service import generate_dataset, make_sparse
from workflows.evaluation_workflow import evaluate_method
from workflows.training_workflow import TrainingWorkflow

LEVEL = 3

logger = logging.getLogger(__name__)


def synthetic_entries(seed: int, count: int):
    subjects = generate_dataset(SynthConfig(seed=seed, n_bins=16, n_az=16, n_el=8), count)
    return [DatasetEntry(subject=f"subject_{seed + i:04d}", ground_truth=truth, sparse=make_sparse(truth, LEVEL))
            for i, truth in enumerate(subjects)]


@pytest.mark.slow
class TestOverfit(unittest.TestCase):
    """Test cases for fitting a single subject"""

    def test_loss_drops_tenfold_in_500_steps(self):
        entries = synthetic_entries(0, 1)
        train_cfg = TrainConfig(batch_size=1, lr=2e-4, epochs=500, seed=0, val_fraction=0.0)
        workflow = TrainingWorkflow(ModelConfig.desk(), train_cfg)
        result = workflow.run(entries)
        self.assertEqual(result.status, "success")
        self.assertEqual(result.steps, 500)
        self.assertLessEqual(result.final_total, 0.1 * result.initial_total)

        model = evaluate_method('model', entries, LEVEL, weights=workflow.weights.detached())
        sh = evaluate_method('sh', entries, LEVEL, fit_cfg=default_fit_config(LEVEL))
        self.assertLess(model.mean_lsd_db, sh.mean_lsd_db)


@pytest.mark.slow
class TestRelativeQuality(unittest.TestCase):
    """Test cases for held-out quality against the baselines"""

    def test_model_beats_baselines_at_three_directions(self):
        train_set = synthetic_entries(0, 32)
        held_out = synthetic_entries(1000, 8)
        train_cfg = TrainConfig(batch_size=8, lr=2e-4, epochs=200, seed=0, val_fraction=0.0)
        workflow = TrainingWorkflow(ModelConfig.desk(), train_cfg)
        self.assertEqual(workflow.run(train_set).status, "success")

        model = evaluate_method('model', held_out, LEVEL, weights=workflow.best_weights)
        barycentric = evaluate_method('barycentric', held_out, LEVEL)
        sh = evaluate_method('sh', held_out, LEVEL)
        self.assertLess(model.mean_lsd_db, barycentric.mean_lsd_db)
        self.assertLess(model.mean_lsd_db, sh.mean_lsd_db)


@pytest.mark.slow
class TestLossAblation(unittest.TestCase):
    """Test cases for training under each loss preset"""

    def test_every_preset_trains_and_reports(self):
        train_set = synthetic_entries(0, 8)
        held_out = synthetic_entries(1000, 2)
        for preset in ('lsd_ild_ndl', 'lsd_ild', 'mse'):
            train_cfg = TrainConfig(batch_size=4, lr=2e-4, epochs=20, seed=0, val_fraction=0.0, loss_preset=preset)
            workflow = TrainingWorkflow(ModelConfig.desk(), train_cfg)
            result = workflow.run(train_set)
            self.assertEqual(result.status, "success", preset)
            self.assertLess(result.final_total, result.initial_total, preset)
            report = evaluate_method('model', held_out, LEVEL, weights=workflow.best_weights)
            self.assertIsNotNone(report.mean_ndl_db2, preset)

    def test_neighbor_term_lowers_held_out_ndl(self):
        """Test the full loss leaves less neighbor dissimilarity on held-out subjects than plain MSE"""
        train_set = synthetic_entries(0, 32)
        held_out = synthetic_entries(1000, 8)
        ndl = {}
        for preset in ('lsd_ild_ndl', 'mse'):
            train_cfg = TrainConfig(batch_size=8, lr=2e-4, epochs=200, seed=0, val_fraction=0.0, loss_preset=preset)
            workflow = TrainingWorkflow(ModelConfig.desk(), train_cfg)
            self.assertEqual(workflow.run(train_set).status, "success", preset)
            ndl[preset] = evaluate_method('model', held_out, LEVEL, weights=workflow.best_weights).mean_ndl_db2
        logger.info("Held-out NDL at level %d: lsd_ild_ndl=%.4f mse=%.4f", LEVEL, ndl['lsd_ild_ndl'], ndl['mse'])
        self.assertLessEqual(ndl['lsd_ild_ndl'], ndl['mse'])


if __name__ == '__main__':
    pytest.main([__file__])

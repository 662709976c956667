"""
Adam training loop for the SH transformer.

One example is one subject at one sparsity level. A batch builds one graph per
example and sums the example losses in a fixed order before a single backward
pass, so runs with the same seed and data reproduce the same loss curve.
"""

import logging
import math
import os
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from config.logging_config import log_training_metrics, log_workflow_step
from models.config_models import ModelConfig, SHFitConfig, TrainConfig
from models.hrtf_models import SHCoefficients, neighbor_average_matrix
from models.report_models import LossBreakdown
from models.sh_transformer import ModelWeights, build, forward_field
from nn.tensor import Tensor, backward
from services.container_service import Checkpoint, write_checkpoint
from services.dataset_service import DatasetEntry
from services.loss_service import LOSS_COMPONENTS, breakdown_of, loss_terms
from services.sht_service import design_matrix, fit_sh
from utils.exceptions import InsufficientDataError, InvalidArgumentError, TrainingDivergedError, HRTFError
from utils.helpers import atomic_write_with, batch_list, counter_generator, generate_run_id, name_key
from workflows.states import EpochRecord, TrainingResult, TrainingState

logger = logging.getLogger(__name__)

LOSS_CURVE_NAME = 'loss_curve.csv'
LOSS_CURVE_COLUMNS = ['epoch', 'lsd', 'ild', 'ndl', 'total', 'split']


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bias-corrected Adam update; returns (param, m, v)"""
    if t < 1:
        raise InvalidArgumentError(f"Adam step counter starts at 1, got {t}")
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise InvalidArgumentError(
            f"Adam shapes disagree: param {param.shape}, grad {grad.shape}, m {m.shape}, v {v.shape}"
        )
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class AdamOptimizer:
    """Adam state for every tensor of a ModelWeights; updates parameters in place"""

    def __init__(self, weights: ModelWeights, cfg: TrainConfig,
                 m: Optional[Dict[str, np.ndarray]] = None, v: Optional[Dict[str, np.ndarray]] = None,
                 step: int = 0):
        self.weights = weights
        self.cfg = cfg
        self.t = step
        self.m = m if m is not None else {name: np.zeros_like(t.data) for name, t in weights.parameters()}
        self.v = v if v is not None else {name: np.zeros_like(t.data) for name, t in weights.parameters()}

    def zero_grad(self) -> None:
        self.weights.zero_grad()

    def step(self) -> None:
        self.t += 1
        for name, tensor in self.weights.parameters():
            grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            tensor.data, self.m[name], self.v[name] = adam_step(
                tensor.data, grad, self.m[name], self.v[name], self.t, self.cfg.lr,
                self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps,
            )


class TrainingExample(BaseModel):
    """Precomputed inputs and targets of one dataset entry"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    subject: str
    coeffs_in: SHCoefficients
    target_db: np.ndarray
    target_basis: np.ndarray
    neighbor_matrix: Optional[np.ndarray] = None


def prepare_example(entry: DatasetEntry, model_cfg: ModelConfig, ridge_lambda: float) -> TrainingExample:
    truth = entry.ground_truth
    if truth.n_bins != model_cfg.n_bins:
        raise InvalidArgumentError(
            f"subject {entry.subject} has {truth.n_bins} bins, model expects {model_cfg.n_bins}"
        )
    coeffs_in = fit_sh(entry.sparse, SHFitConfig(order=model_cfg.order_in, ridge_lambda=ridge_lambda))
    neighbor_matrix = neighbor_average_matrix(truth.grid) if truth.grid.is_equiangular else None
    return TrainingExample(
        subject=entry.subject,
        coeffs_in=coeffs_in,
        target_db=truth.magnitudes_db,
        target_basis=design_matrix(truth.grid, model_cfg.order_out),
        neighbor_matrix=neighbor_matrix,
    )


def split_subjects(entries: Sequence[DatasetEntry], val_fraction: float,
                   seed: int) -> Tuple[List[DatasetEntry], List[DatasetEntry]]:
    """Seeded subject-level split; keeps at least one training subject"""
    if not 0.0 <= val_fraction < 1.0:
        raise InvalidArgumentError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    n = len(entries)
    n_val = min(int(round(n * val_fraction)), max(n - 1, 0))
    order = counter_generator(seed, name_key('split')).permutation(n)
    val_idx = set(int(i) for i in order[:n_val])
    train = [e for i, e in enumerate(entries) if i not in val_idx]
    val = [e for i, e in enumerate(entries) if i in val_idx]
    return train, val


class TrainingWorkflow:
    """Epoch loop with seeded shuffling, checkpointing and a loss curve"""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 checkpoint_path: Optional[str] = None, weights: Optional[ModelWeights] = None,
                 meta: Optional[dict] = None):
        model_cfg.validate_invariants()
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self.loss_weights = train_cfg.loss_weights()
        self.checkpoint_path = checkpoint_path
        self.meta = dict(meta or {})
        self.weights = (weights or build(model_cfg, train_cfg.seed)).trainable()
        self.optimizer = AdamOptimizer(self.weights, train_cfg)
        self.best_weights: Optional[ModelWeights] = None

    # Loss evaluation

    def _example_loss(self, weights: ModelWeights, example: TrainingExample) -> Tuple[Tensor, Dict[str, Tensor]]:
        field_db = forward_field(weights, example.coeffs_in, example.target_basis)
        return loss_terms(field_db, Tensor(example.target_db), example.neighbor_matrix, self.loss_weights)

    @staticmethod
    def _check_finite(epoch: int, batch: int, total: Tensor, terms: Dict[str, Tensor]) -> None:
        for name in LOSS_COMPONENTS:
            if name in terms and not math.isfinite(float(terms[name].data)):
                raise TrainingDivergedError(epoch, batch, name, float(terms[name].data))
        if not math.isfinite(float(total.data)):
            raise TrainingDivergedError(epoch, batch, 'total', float(total.data))

    def evaluate(self, examples: Sequence[TrainingExample], weights: Optional[ModelWeights] = None,
                 epoch: int = 0) -> LossBreakdown:
        """Mean loss breakdown over examples, without gradient tracking"""
        frozen = (weights or self.weights).detached()
        sums: Dict[str, float] = {}
        for example in examples:
            total, terms = self._example_loss(frozen, example)
            self._check_finite(epoch, -1, total, terms)
            self._accumulate(sums, breakdown_of(total, terms))
        return self._mean_breakdown(sums, len(examples))

    # Loop

    def train(self, train_set: Sequence[DatasetEntry], val_set: Sequence[DatasetEntry] = (),
              run_id: Optional[str] = None) -> TrainingState:
        """Run the epoch loop; raises on divergence"""
        if not train_set:
            raise InsufficientDataError("training needs at least one subject")
        cfg = self.train_cfg
        state = TrainingState(workflow_id=run_id or generate_run_id(), step=self.optimizer.t)
        train_examples = [prepare_example(e, self.model_cfg, cfg.ridge_lambda) for e in train_set]
        val_examples = [prepare_example(e, self.model_cfg, cfg.ridge_lambda) for e in val_set]
        log_workflow_step(state.workflow_id, "prepare", "completed",
                          {'train': len(train_examples), 'val': len(val_examples)})

        for epoch in range(1, cfg.epochs + 1):
            state.epoch = epoch
            train_breakdown, stopped = self._run_epoch(epoch, train_examples, state)
            self._record(state, epoch, 'train', train_breakdown)
            monitored = train_breakdown
            if val_examples:
                monitored = self.evaluate(val_examples, epoch=epoch)
                self._record(state, epoch, 'val', monitored)
            self._maybe_checkpoint(state, epoch, monitored.total)
            if stopped:
                logger.info(f"Reached max_steps={cfg.max_steps} at epoch {epoch}")
                break

        self.write_loss_curve(state)
        return state

    def _run_epoch(self, epoch: int, examples: List[TrainingExample], state: TrainingState) -> Tuple[LossBreakdown, bool]:
        cfg = self.train_cfg
        order = counter_generator(cfg.seed, name_key('shuffle'), epoch).permutation(len(examples))
        sums: Dict[str, float] = {}
        seen = 0
        for batch_index, batch in enumerate(batch_list([int(i) for i in order], cfg.batch_size)):
            self.optimizer.zero_grad()
            batch_total: Optional[Tensor] = None
            for i in batch:
                total, terms = self._example_loss(self.weights, examples[i])
                self._check_finite(epoch, batch_index, total, terms)
                self._accumulate(sums, breakdown_of(total, terms))
                batch_total = total if batch_total is None else batch_total + total
            backward(batch_total * (1.0 / len(batch)))
            self.optimizer.step()
            seen += len(batch)
            state.step = self.optimizer.t
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                return self._mean_breakdown(sums, seen), True
        return self._mean_breakdown(sums, seen), False

    @staticmethod
    def _accumulate(sums: Dict[str, float], breakdown: LossBreakdown) -> None:
        for name, value in breakdown.model_dump().items():
            if value is not None:
                sums[name] = sums.get(name, 0.0) + value

    @staticmethod
    def _mean_breakdown(sums: Dict[str, float], count: int) -> LossBreakdown:
        """Per-example means; terms no example computed stay unset"""
        return LossBreakdown(**{name: value / max(count, 1) for name, value in sums.items()})

    def _record(self, state: TrainingState, epoch: int, split: str, breakdown: LossBreakdown) -> None:
        state.history.append(EpochRecord.from_breakdown(epoch, split, breakdown))
        log_training_metrics(state.workflow_id, epoch, split, breakdown.model_dump())
        logger.debug(f"Epoch {epoch} {split}: total={breakdown.total:.6f} lsd={breakdown.lsd:.4f}")

    # Persistence

    def checkpoint(self, weights: Optional[ModelWeights] = None, **meta) -> Checkpoint:
        return Checkpoint(
            weights=(weights or self.weights).detached(),
            step=self.optimizer.t,
            adam_m={k: v.copy() for k, v in self.optimizer.m.items()},
            adam_v={k: v.copy() for k, v in self.optimizer.v.items()},
            meta={**self.meta, 'train_config': self.train_cfg.model_dump(mode='json'), **meta},
        )

    def _periodic_path(self, epoch: int) -> str:
        stem, suffix = os.path.splitext(self.checkpoint_path)
        return f"{stem}_epoch{epoch:04d}{suffix or '.hrc'}"

    def _maybe_checkpoint(self, state: TrainingState, epoch: int, monitored_total: float) -> None:
        improved = state.best_total is None or monitored_total < state.best_total
        if improved:
            state.best_total = monitored_total
            state.best_epoch = epoch
            self.best_weights = self.weights.detached()
        if self.checkpoint_path is None:
            return
        if improved:
            write_checkpoint(self.checkpoint(epoch=epoch, best_total=monitored_total), self.checkpoint_path)
        if epoch % self.train_cfg.checkpoint_every == 0:
            path = self._periodic_path(epoch)
            write_checkpoint(self.checkpoint(epoch=epoch), path)
            state.checkpoints.append(path)

    def loss_curve_path(self) -> Optional[str]:
        if self.checkpoint_path is None:
            return None
        return os.path.join(os.path.dirname(os.path.abspath(self.checkpoint_path)), LOSS_CURVE_NAME)

    def loss_curve_columns(self) -> List[str]:
        """Loss curve header; the mse column appears only when the objective weights it"""
        if self.loss_weights.w_mse > 0.0:
            return LOSS_CURVE_COLUMNS[:-2] + ['mse'] + LOSS_CURVE_COLUMNS[-2:]
        return list(LOSS_CURVE_COLUMNS)

    def write_loss_curve(self, state: TrainingState) -> Optional[str]:
        path = self.loss_curve_path()
        if path is None:
            return None
        frame = pd.DataFrame([r.model_dump() for r in state.history], columns=self.loss_curve_columns())
        atomic_write_with(path, lambda tmp: frame.to_csv(tmp, index=False, float_format='%.17g'))
        return path

    def run(self, train_set: Sequence[DatasetEntry], val_set: Sequence[DatasetEntry] = ()) -> TrainingResult:
        """Train and summarize; failures are reported in the result instead of raised"""
        workflow_id = generate_run_id()
        start_time = datetime.now()
        logger.info(f"Starting training workflow {workflow_id}: {len(train_set)} train / {len(val_set)} val subjects")

        try:
            state = self.train(train_set, val_set, run_id=workflow_id)
            execution_time = (datetime.now() - start_time).total_seconds()
            train_rows = [r for r in state.history if r.split == 'train']
            result = TrainingResult(
                workflow_id=workflow_id,
                status="success",
                epochs_completed=state.epoch,
                steps=state.step,
                initial_total=train_rows[0].total if train_rows else None,
                final_total=train_rows[-1].total if train_rows else None,
                best_total=state.best_total,
                best_epoch=state.best_epoch,
                checkpoint_path=self.checkpoint_path,
                loss_curve_path=self.loss_curve_path(),
                history=state.history,
                execution_time=execution_time,
                summary=self._generate_summary(state),
            )
            logger.info(f"Training workflow {workflow_id} completed: {result.summary}")
            return result

        except HRTFError as e:
            execution_time = (datetime.now() - start_time).total_seconds()
            logger.error(f"Training workflow {workflow_id} failed: {e}")
            return TrainingResult(
                workflow_id=workflow_id,
                status="failed",
                checkpoint_path=self.checkpoint_path,
                errors=[str(e)],
                execution_time=execution_time,
                summary=f"Training failed: {e}",
            )

    @staticmethod
    def _generate_summary(state: TrainingState) -> str:
        best = f"{state.best_total:.4f}" if state.best_total is not None else "n/a"
        return f"{state.epoch} epochs, {state.step} steps, best total {best} (epoch {state.best_epoch})"


def train(model_cfg: ModelConfig, train_set: Sequence[DatasetEntry], val_set: Sequence[DatasetEntry],
          cfg: TrainConfig, checkpoint_path: Optional[str] = None) -> TrainingResult:
    return TrainingWorkflow(model_cfg, cfg, checkpoint_path).run(train_set, val_set)

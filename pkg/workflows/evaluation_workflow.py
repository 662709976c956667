"""
Metric evaluation of upsampling methods over a dataset.
"""

import concurrent.futures
import logging
import os
from datetime import datetime
from typing import Callable, Dict, Optional, Sequence

from config.settings import settings
from models.config_models import SHFitConfig, default_fit_config
from models.hrtf_models import HRTFSet
from models.report_models import MetricReport, SubjectMetrics
from models.sh_transformer import ModelWeights, input_fit_config, upsample
from services.baseline_service import barycentric_upsample, sh_baseline_upsample
from services.dataset_service import DatasetEntry
from services.metrics_service import ild_metric, itd_metric, lsd_metric, ndl_statistic
from utils.exceptions import HRTFError, InvalidArgumentError, InvalidDatasetError
from utils.helpers import atomic_write_text, generate_run_id, log_performance
from workflows.states import EvaluationResult

logger = logging.getLogger(__name__)

METHODS = ('model', 'barycentric', 'sh', 'identity')

Upsampler = Callable[[DatasetEntry], HRTFSet]


def make_upsampler(method: str, weights: Optional[ModelWeights] = None,
                   fit_cfg: Optional[SHFitConfig] = None, level: Optional[int] = None) -> Upsampler:
    """Function producing the method's estimate on the ground-truth grid of an entry"""
    if method == 'identity':
        return lambda entry: entry.ground_truth
    if method == 'barycentric':
        return lambda entry: barycentric_upsample(entry.sparse, entry.ground_truth.grid)
    if method == 'sh':
        if fit_cfg is None:
            if level is None:
                raise InvalidArgumentError("the sh method needs a fit configuration or a sparsity level")
            fit_cfg = default_fit_config(level)
        return lambda entry: sh_baseline_upsample(entry.sparse, entry.ground_truth.grid, fit_cfg)
    if method == 'model':
        if weights is None:
            raise InvalidArgumentError("the model method needs checkpoint weights")
        model_fit = fit_cfg or input_fit_config(weights.config)
        return lambda entry: upsample(weights, entry.sparse, entry.ground_truth.grid, model_fit)
    raise InvalidArgumentError(f"unknown method '{method}', choose from {', '.join(METHODS)}")


def subject_metrics(subject: str, estimate: HRTFSet, truth: HRTFSet) -> SubjectMetrics:
    return SubjectMetrics(
        subject=subject,
        lsd_db=lsd_metric(estimate, truth),
        ild_db=ild_metric(estimate, truth),
        itd_us=itd_metric(estimate, truth),
        ndl_db2=ndl_statistic(estimate, truth),
    )


def _evaluate_entry(upsampler: Upsampler, entry: DatasetEntry) -> SubjectMetrics:
    if entry.ground_truth is None:
        raise InvalidDatasetError(f"missing ground truth for subject {entry.subject}")
    metrics = subject_metrics(entry.subject, upsampler(entry), entry.ground_truth)
    logger.debug(f"{entry.subject}: lsd={metrics.lsd_db:.3f} dB ild={metrics.ild_db:.3f} dB itd={metrics.itd_us:.1f} us")
    return metrics


def evaluate_method(method: str, entries: Sequence[DatasetEntry], level: int,
                    weights: Optional[ModelWeights] = None, fit_cfg: Optional[SHFitConfig] = None,
                    workers: Optional[int] = None) -> MetricReport:
    """Per-subject LSD / ILD / ITD of one method; subjects keep their input order"""
    if not entries:
        raise InvalidDatasetError("no subjects to evaluate")
    upsampler = make_upsampler(method, weights, fit_cfg, level)
    workers = settings.evaluation.workers if workers is None else workers
    if workers < 1:
        raise InvalidArgumentError(f"workers must be positive, got {workers}")

    with log_performance(f"evaluate_{method}") as info:
        info.update({'level': level, 'subjects': len(entries), 'workers': workers})
        if workers == 1:
            subjects = [_evaluate_entry(upsampler, entry) for entry in entries]
        else:
            with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
                subjects = list(executor.map(lambda entry: _evaluate_entry(upsampler, entry), entries))

    return MetricReport(method=method, level=level, subjects=subjects)


def write_report(report: MetricReport, path: str) -> None:
    """Write a report as CSV or JSON, chosen by the file extension"""
    extension = os.path.splitext(path)[1].lower()
    if extension == '.csv':
        atomic_write_text(path, report.to_csv())
    elif extension == '.json':
        atomic_write_text(path, report.to_json())
    else:
        raise InvalidArgumentError(f"report path must end in .csv or .json, got {path}")
    logger.info(f"Wrote {report.method} report for level {report.level} to {path}")


class EvaluationWorkflow:
    """Evaluate one method on a dataset and optionally persist the report"""

    def __init__(self, method: str, level: int, weights: Optional[ModelWeights] = None,
                 fit_cfg: Optional[SHFitConfig] = None, workers: Optional[int] = None):
        if method not in METHODS:
            raise InvalidArgumentError(f"unknown method '{method}', choose from {', '.join(METHODS)}")
        self.method = method
        self.level = level
        self.weights = weights
        self.fit_cfg = fit_cfg
        self.workers = workers

    def run(self, entries: Sequence[DatasetEntry], report_path: Optional[str] = None) -> EvaluationResult:
        workflow_id = generate_run_id()
        start_time = datetime.now()
        logger.info(f"Starting evaluation workflow {workflow_id}: {self.method} at level {self.level}")

        try:
            report = evaluate_method(self.method, entries, self.level, self.weights, self.fit_cfg, self.workers)
            if report_path is not None:
                write_report(report, report_path)
            execution_time = (datetime.now() - start_time).total_seconds()
            result = EvaluationResult(
                workflow_id=workflow_id,
                status="success",
                report=report,
                report_path=report_path,
                execution_time=execution_time,
                summary=self._generate_summary(report),
            )
            logger.info(f"Evaluation workflow {workflow_id} completed: {result.summary}")
            return result

        except HRTFError as e:
            execution_time = (datetime.now() - start_time).total_seconds()
            logger.error(f"Evaluation workflow {workflow_id} failed: {e}")
            return EvaluationResult(
                workflow_id=workflow_id,
                status="failed",
                report_path=report_path,
                errors=[str(e)],
                execution_time=execution_time,
                summary=f"Evaluation failed: {e}",
            )

    @staticmethod
    def _generate_summary(report: MetricReport) -> str:
        means: Dict[str, Optional[float]] = report.aggregate()
        return (f"{report.method} L{report.level} over {len(report.subjects)} subjects: "
                f"LSD {means['lsd_db']:.3f} dB, ILD {means['ild_db']:.3f} dB, ITD {means['itd_us']:.2f} us")

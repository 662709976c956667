from typing import List, Optional
from pydantic import BaseModel, Field
from datetime import datetime

from models.report_models import LossBreakdown, MetricReport


class EpochRecord(BaseModel):
    """One row of the loss curve"""
    epoch: int
    split: str  # 'train' or 'val'
    lsd: float
    ild: float
    ndl: Optional[float] = None
    mse: float
    total: float

    @classmethod
    def from_breakdown(cls, epoch: int, split: str, breakdown: LossBreakdown) -> 'EpochRecord':
        return cls(epoch=epoch, split=split, **breakdown.model_dump())


class TrainingState(BaseModel):
    """Mutable progress of a training run"""
    workflow_id: str
    epoch: int = 0
    step: int = 0
    best_total: Optional[float] = None
    best_epoch: Optional[int] = None
    history: List[EpochRecord] = []
    checkpoints: List[str] = []
    created_at: datetime = Field(default_factory=datetime.now)


class TrainingResult(BaseModel):
    """Final result of a training run"""
    workflow_id: str
    status: str  # 'success', 'failed'
    epochs_completed: int = 0
    steps: int = 0
    initial_total: Optional[float] = None
    final_total: Optional[float] = None
    best_total: Optional[float] = None
    best_epoch: Optional[int] = None
    checkpoint_path: Optional[str] = None
    loss_curve_path: Optional[str] = None
    history: List[EpochRecord] = []
    errors: List[str] = []
    execution_time: float
    summary: str


class EvaluationResult(BaseModel):
    """Final result of an evaluation run"""
    workflow_id: str
    status: str  # 'success', 'failed'
    report: Optional[MetricReport] = None
    report_path: Optional[str] = None
    errors: List[str] = []
    execution_time: float
    summary: str

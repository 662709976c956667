"""
Loss breakdowns and metric reports.
"""

import json
import math
from typing import Dict, List, Optional

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

REPORT_COLUMNS = ['method', 'level', 'subject', 'lsd_db', 'ild_db', 'itd_us', 'ndl_db2']
AGGREGATE_SUBJECT = 'mean'


class LossBreakdown(BaseModel):
    """Per-term values of the training objective and their weighted sum"""
    model_config = ConfigDict(frozen=True)

    lsd: float = Field(default=0.0, ge=0.0, description="Log-spectral distance, dB")
    ild: float = Field(default=0.0, ge=0.0, description="Interaural level difference error, dB")
    ndl: Optional[float] = Field(default=None, ge=0.0, description="Neighbor dissimilarity, dB^2; None off equiangular grids")
    mse: float = Field(default=0.0, ge=0.0, description="Mean squared dB error, dB^2")
    total: float = Field(default=0.0, ge=0.0)

    @model_validator(mode='after')
    def _check_finite(self) -> 'LossBreakdown':
        for name in ('lsd', 'ild', 'ndl', 'mse', 'total'):
            value = getattr(self, name)
            if value is not None and not math.isfinite(value):
                raise ValueError(f"loss component {name} is not finite")
        return self


class SubjectMetrics(BaseModel):
    subject: str
    lsd_db: float
    ild_db: float
    itd_us: float
    ndl_db2: Optional[float] = Field(default=None, description="Only on equiangular targets")


class MetricReport(BaseModel):
    """Per-subject LSD / ILD / ITD results of one method at one sparsity level"""
    method: str
    level: int
    subjects: List[SubjectMetrics] = Field(default_factory=list)

    @property
    def mean_lsd_db(self) -> float:
        return self._mean('lsd_db')

    @property
    def mean_ild_db(self) -> float:
        return self._mean('ild_db')

    @property
    def mean_itd_us(self) -> float:
        return self._mean('itd_us')

    @property
    def mean_ndl_db2(self) -> Optional[float]:
        values = [s.ndl_db2 for s in self.subjects if s.ndl_db2 is not None]
        return sum(values) / len(values) if values else None

    def _mean(self, field: str) -> float:
        if not self.subjects:
            return float('nan')
        return sum(getattr(s, field) for s in self.subjects) / len(self.subjects)

    def aggregate(self) -> Dict[str, Optional[float]]:
        return {
            'lsd_db': self.mean_lsd_db,
            'ild_db': self.mean_ild_db,
            'itd_us': self.mean_itd_us,
            'ndl_db2': self.mean_ndl_db2,
        }

    def to_frame(self) -> pd.DataFrame:
        """One row per subject plus a final aggregate row (subject 'mean')"""
        rows = [{'method': self.method, 'level': self.level, **s.model_dump()} for s in self.subjects]
        rows.append({'method': self.method, 'level': self.level, 'subject': AGGREGATE_SUBJECT,
                     **self.aggregate()})
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def to_csv(self) -> str:
        return self.to_frame().to_csv(index=False, float_format='%.17g')

    def to_json(self) -> str:
        payload = self.model_dump()
        payload['aggregate'] = self.aggregate()
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> 'MetricReport':
        payload = json.loads(text)
        payload.pop('aggregate', None)
        return cls.model_validate(payload)

    @classmethod
    def from_csv(cls, path_or_buffer) -> 'MetricReport':
        frame = pd.read_csv(path_or_buffer, dtype={'subject': str})
        if frame.empty:
            raise ValueError("report CSV has no rows")
        per_subject = frame[frame['subject'] != AGGREGATE_SUBJECT]
        subjects = []
        for row in per_subject.to_dict(orient='records'):
            ndl = row.get('ndl_db2')
            subjects.append(SubjectMetrics(
                subject=str(row['subject']),
                lsd_db=float(row['lsd_db']),
                ild_db=float(row['ild_db']),
                itd_us=float(row['itd_us']),
                ndl_db2=None if ndl is None or pd.isna(ndl) else float(ndl),
            ))
        first = frame.iloc[0]
        return cls(method=str(first['method']), level=int(first['level']), subjects=subjects)

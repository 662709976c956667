import os
from dotenv import load_dotenv
from typing import Dict
from dataclasses import dataclass, field

load_dotenv()


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


@dataclass
class LoggingConfig:
    level: str = os.getenv('LOG_LEVEL', 'INFO')
    log_dir: str = os.getenv('LOG_DIR', 'logs')
    to_file: bool = _env_bool('LOG_TO_FILE', 'true')


@dataclass
class DataConfig:
    sample_rate_hz: int = int(os.getenv('HRTF_SAMPLE_RATE', '48000'))
    n_bins: int = int(os.getenv('HRTF_BINS', '64'))
    grid: str = os.getenv('HRTF_GRID', '16x8')
    data_dir: str = os.getenv('HRTF_DATA_DIR', 'data')
    checkpoint_dir: str = os.getenv('HRTF_CHECKPOINT_DIR', 'checkpoints')


@dataclass
class SHDefaults:
    ridge_lambda: float = float(os.getenv('HRTF_SH_RIDGE', '1e-3'))
    order_out: int = int(os.getenv('HRTF_SH_ORDER_OUT', '16'))

    # Input SH order per sparsity level
    order_by_level: Dict[int, int] = field(default=None)

    def __post_init__(self):
        if self.order_by_level is None:
            self.order_by_level = {3: 1, 5: 1, 19: 3, 100: 9}


@dataclass
class TrainingDefaults:
    batch_size: int = int(os.getenv('HRTF_BATCH_SIZE', '8'))
    learning_rate: float = float(os.getenv('HRTF_LR', '2e-4'))
    epochs: int = int(os.getenv('HRTF_EPOCHS', '200'))
    seed: int = int(os.getenv('HRTF_SEED', '0'))
    val_fraction: float = float(os.getenv('HRTF_VAL_FRACTION', '0.1'))


@dataclass
class EvalDefaults:
    itd_lowpass_hz: float = float(os.getenv('HRTF_ITD_LOWPASS_HZ', '1500'))
    itd_max_lag_s: float = float(os.getenv('HRTF_ITD_MAX_LAG_S', '0.002'))
    workers: int = int(os.getenv('HRTF_EVAL_WORKERS', '1'))


class Settings:
    def __init__(self):
        self.logging = LoggingConfig()
        self.data = DataConfig()
        self.sh = SHDefaults()
        self.training = TrainingDefaults()
        self.evaluation = EvalDefaults()

        self.environment = os.getenv('ENVIRONMENT', 'development')
        self.log_level = self.logging.level

        self._validate_settings()

    def _validate_settings(self):
        """Validate that numeric settings are inside their usable ranges"""
        checks = [
            ('HRTF_SAMPLE_RATE', self.data.sample_rate_hz > 0),
            ('HRTF_BINS', self.data.n_bins >= 2),
            ('HRTF_SH_RIDGE', self.sh.ridge_lambda >= 0),
            ('HRTF_SH_ORDER_OUT', self.sh.order_out >= 1),
            ('HRTF_BATCH_SIZE', self.training.batch_size >= 1),
            ('HRTF_LR', self.training.learning_rate > 0),
            ('HRTF_EPOCHS', self.training.epochs >= 1),
            ('HRTF_VAL_FRACTION', 0.0 <= self.training.val_fraction < 1.0),
            ('HRTF_ITD_LOWPASS_HZ', self.evaluation.itd_lowpass_hz > 0),
            ('HRTF_ITD_MAX_LAG_S', self.evaluation.itd_max_lag_s > 0),
            ('HRTF_EVAL_WORKERS', self.evaluation.workers >= 1),
        ]

        invalid_vars = [var_name for var_name, ok in checks if not ok]

        if invalid_vars:
            raise ValueError(f"Invalid values for environment variables: {', '.join(invalid_vars)}")


# Global settings instance
settings = Settings()

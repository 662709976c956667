"""
Validation functions for command-line arguments and configuration files
"""

import os
import re
import logging
from typing import Any, Dict, Optional, Tuple

from dotenv import dotenv_values

from models.config_models import ModelConfig, TrainConfig
from models.hrtf_models import SPARSITY_LEVELS
from utils.exceptions import ConfigFileError, UsageError

logger = logging.getLogger(__name__)

_GRID_SPEC = re.compile(r'^\s*(\d+)\s*[xX]\s*(\d+)\s*$')
REPORT_EXTENSIONS = ('.csv', '.json')


def parse_grid_spec(spec: str) -> Tuple[int, int]:
    """
    Parse an equiangular grid spec "NAZxNEL"
    Returns (n_az, n_el)
    """
    match = _GRID_SPEC.match(spec or '')
    if not match:
        raise UsageError(f"grid must look like NAZxNEL (e.g. 16x8), got '{spec}'")
    n_az, n_el = int(match.group(1)), int(match.group(2))
    if n_az < 3 or n_el < 2:
        raise UsageError(f"grid needs at least 3 azimuths and 2 elevations, got {n_az}x{n_el}")
    return n_az, n_el


def validate_level(level: int) -> int:
    if level not in SPARSITY_LEVELS:
        raise UsageError(f"level must be one of {', '.join(str(v) for v in SPARSITY_LEVELS)}, got {level}")
    return level


def validate_report_path(path: str) -> str:
    """Report files are CSV or JSON"""
    if os.path.splitext(path)[1].lower() not in REPORT_EXTENSIONS:
        raise UsageError(f"report path must end in .csv or .json, got {path}")
    return path


def validate_output_path(path: str, force: bool) -> str:
    """Refuse to overwrite an existing output unless forced"""
    if os.path.exists(path) and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    return path


def _clean_value(value: Optional[str]) -> Optional[str]:
    if value is None:
        return None
    value = value.strip()
    return value or None


def read_config_file(path: str) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """
    Read a plain-text key=value training configuration.
    Returns (ModelConfig fields, TrainConfig fields); values stay strings for pydantic to coerce
    """
    if not os.path.isfile(path):
        raise ConfigFileError(path, "configuration file not found")

    model_fields = set(ModelConfig.model_fields)
    train_fields = set(TrainConfig.model_fields)
    model_kwargs: Dict[str, Any] = {}
    train_kwargs: Dict[str, Any] = {}

    for raw_key, raw_value in dotenv_values(path).items():
        key = raw_key.strip().lower()
        value = _clean_value(raw_value)
        if value is None:
            raise ConfigFileError(raw_key, "missing value")
        if key in model_fields:
            model_kwargs[key] = value
        elif key in train_fields:
            train_kwargs[key] = value
        else:
            raise ConfigFileError(raw_key, "unknown configuration key")

    logger.debug(f"Read {len(model_kwargs)} model and {len(train_kwargs)} training settings from {path}")
    return model_kwargs, train_kwargs

"""
Logging configuration for the HRTF upsampling toolkit.

Console output for people, dated rotating files for runs: a full log, an
error log, and two JSON-lines streams (per-epoch losses, operation timings).
"""

import os
import sys
import json
import logging
import logging.config
from datetime import datetime
from typing import Any, Dict, Optional

from config.settings import settings

PACKAGE_LOGGERS = ('services', 'workflows', 'models', 'nn', 'utils')
TEXT_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
# Messages on the JSON streams are already JSON objects
JSON_FORMAT = ('{"timestamp": "%(asctime)s", "logger": "%(name)s", "level": "%(levelname)s", '
               '"message": %(message)s}')

_MB = 1024 * 1024


def _rotating(path: str, level: int, formatter: str, max_mb: int, backups: int) -> Dict[str, Any]:
    return {
        'class': 'logging.handlers.RotatingFileHandler',
        'level': level,
        'formatter': formatter,
        'filename': path,
        'maxBytes': max_mb * _MB,
        'backupCount': backups,
        'encoding': 'utf8',
    }


def build_logging_config(level_name: str, logs_dir: str, use_files: bool, stamp: str) -> Dict[str, Any]:
    """dictConfig payload; file handlers are left out when ``use_files`` is false"""
    log_level = getattr(logging, level_name, logging.INFO)
    handlers: Dict[str, Dict[str, Any]] = {
        'console': {'class': 'logging.StreamHandler', 'level': log_level, 'formatter': 'text',
                    'stream': 'ext://sys.stderr'},
    }
    if use_files:
        handlers['run_file'] = _rotating(os.path.join(logs_dir, f'hrtf_{stamp}.log'), logging.DEBUG, 'text', 10, 5)
        handlers['error_file'] = _rotating(os.path.join(logs_dir, f'errors_{stamp}.log'), logging.ERROR, 'text', 10, 5)
        handlers['training_file'] = _rotating(os.path.join(logs_dir, f'training_{stamp}.log'), logging.INFO, 'json', 10, 10)
        handlers['performance_file'] = _rotating(os.path.join(logs_dir, f'performance_{stamp}.log'), logging.INFO, 'json', 5, 5)

    def attached(*names):
        return [name for name in names if name in handlers]

    general = attached('console', 'run_file', 'error_file')
    loggers: Dict[str, Dict[str, Any]] = {
        '': {'level': log_level, 'handlers': general, 'propagate': False},
        'performance': {'level': logging.INFO, 'handlers': attached('performance_file'), 'propagate': False},
        'training_metrics': {'level': logging.INFO, 'handlers': attached('training_file'), 'propagate': False},
    }
    for package in PACKAGE_LOGGERS:
        loggers[package] = {'level': log_level, 'handlers': general, 'propagate': False}
    # autodiff internals only speak up on problems
    loggers['nn']['level'] = max(log_level, logging.WARNING)

    return {
        'version': 1,
        'disable_existing_loggers': False,
        'formatters': {
            'text': {'format': TEXT_FORMAT, 'datefmt': DATE_FORMAT},
            'json': {'format': JSON_FORMAT, 'datefmt': DATE_FORMAT},
        },
        'handlers': handlers,
        'loggers': loggers,
    }


def setup_logging(level: Optional[str] = None, log_dir: Optional[str] = None, to_file: Optional[bool] = None):
    """Apply the toolkit's logging configuration and return the startup logger"""
    level_name = (level or settings.log_level).upper()
    logs_dir = log_dir or settings.logging.log_dir
    use_files = settings.logging.to_file if to_file is None else to_file
    if use_files:
        os.makedirs(logs_dir, exist_ok=True)

    logging.config.dictConfig(
        build_logging_config(level_name, logs_dir, use_files, datetime.now().strftime("%Y-%m-%d"))
    )

    logger = logging.getLogger('system.startup')
    logger.debug(f"Logging at {level_name}" + (f", files in {os.path.abspath(logs_dir)}" if use_files else ""))
    return logger


def log_training_metrics(run_id: str, epoch: int, split: str, breakdown: dict):
    """One JSON line per epoch and split on the training stream"""
    payload = {'run_id': run_id, 'epoch': epoch, 'split': split, **breakdown}
    logging.getLogger('training_metrics').info(json.dumps(payload, sort_keys=True))


def log_performance_metric(operation: str, execution_time: float, additional_info: dict = None):
    payload = {**(additional_info or {}), 'operation': operation, 'execution_time_seconds': execution_time}
    logging.getLogger('performance').info(json.dumps(payload, sort_keys=True, default=str))


def log_workflow_step(workflow_id: str, step: str, status: str, details: dict = None):
    suffix = f" ({details})" if details else ""
    logging.getLogger('workflows').info(f"[{workflow_id}] {step}: {status}{suffix}")


def handle_exception(exc_type, exc_value, exc_traceback):
    """Log uncaught exceptions as critical; Ctrl-C keeps the default behavior"""
    if issubclass(exc_type, KeyboardInterrupt):
        sys.__excepthook__(exc_type, exc_value, exc_traceback)
        return
    logging.getLogger('system.exceptions').critical("Uncaught exception",
                                                    exc_info=(exc_type, exc_value, exc_traceback))


def install_exception_hook():
    sys.excepthook = handle_exception

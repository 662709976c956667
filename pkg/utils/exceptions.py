"""
Error taxonomy for the HRTF upsampling toolkit.

Every failure raised on purpose by the library is an ``HRTFError``. Argument
problems additionally subclass ``ValueError`` so callers that only know the
builtin hierarchy still catch them.
"""

from typing import Optional


class HRTFError(Exception):
    """Base class for all toolkit errors"""


class InvalidArgumentError(HRTFError, ValueError):
    """An argument violates a documented precondition"""


class UnsupportedTopologyError(HRTFError, ValueError):
    """The operation needs neighbor topology the grid does not have"""


class IllConditionedFitError(HRTFError, ValueError):
    """A least-squares fit has no unique solution"""

    def __init__(self, message: str, bin_index: int = 0, ear: str = "left"):
        super().__init__(message)
        self.bin_index = bin_index
        self.ear = ear


class InsufficientDataError(HRTFError, ValueError):
    """Too few measurements for the requested method"""


class InvalidConfigError(HRTFError, ValueError):
    """A configuration invariant is violated"""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ContainerFormatError(HRTFError):
    """A container or checkpoint file is malformed"""

    def __init__(self, message: str, offset: Optional[int] = None):
        where = f" (at byte offset {offset})" if offset is not None else ""
        super().__init__(f"{message}{where}")
        self.offset = offset


class InsufficientResolutionError(HRTFError, ValueError):
    """The spectrum is too coarse for the requested estimate"""


class InvalidDatasetError(HRTFError):
    """A dataset directory is missing subjects or ground truth"""


class TrainingDivergedError(HRTFError):
    """A training loss became non-finite"""

    def __init__(self, epoch: int, batch: int, component: str, value: float):
        super().__init__(
            f"Non-finite loss at epoch {epoch}, batch {batch}: {component} = {value}"
        )
        self.epoch = epoch
        self.batch = batch
        self.component = component


class ConfigFileError(HRTFError, ValueError):
    """A key=value configuration file is invalid"""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class UsageError(HRTFError):
    """Command-line usage problem detected after argument parsing"""

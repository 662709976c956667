"""
Utility functions for the HRTF upsampling toolkit
"""

import os
import time
import uuid
import zlib
import tempfile
import logging
from contextlib import contextmanager
from typing import Any, Callable, Iterator, List, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


def generate_run_id() -> str:
    """Generate a unique run ID"""
    return str(uuid.uuid4())


def counter_generator(seed: int, *counter: int) -> np.random.Generator:
    """
    Counter-based generator keyed by ``seed`` and positioned by ``counter``.

    Philox is a counter-based bit generator, so every (seed, counter) pair
    addresses an independent stream without any global state. Up to three
    counter words are placed in the high words of the Philox counter; the
    lowest word is left for the generator's own increments so neighbouring
    keys never overlap.
    """
    if len(counter) > 3:
        raise ValueError("At most three counter words are supported")
    words = [0, 0, 0, 0]
    for position, value in enumerate(counter):
        words[3 - position] = int(value) & _MASK64
    bit_generator = np.random.Philox(key=int(seed) & _MASK64, counter=np.array(words, dtype=np.uint64))
    return np.random.Generator(bit_generator)


def name_key(name: str) -> int:
    """Stable 32-bit key for a string (used to address generator streams by name)"""
    return zlib.crc32(name.encode("utf-8")) & 0xFFFFFFFF


def batch_list(items: Sequence[Any], batch_size: int = 8) -> List[List[Any]]:
    """Split list into batches of specified size"""
    batches = []
    for i in range(0, len(items), batch_size):
        batches.append(list(items[i:i + batch_size]))
    return batches


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write ``payload`` to ``path`` through a temporary file and a rename"""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp_", dir=directory)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_with(path: str, writer: Callable[[str], None]) -> None:
    """Let ``writer`` produce a file at a temporary path, then rename it into place"""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    suffix = os.path.splitext(path)[1]
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp_", suffix=suffix, dir=directory)
    os.close(fd)
    try:
        writer(tmp_path)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


@contextmanager
def log_performance(operation: str, slow_threshold_s: float = 30.0) -> Iterator[dict]:
    """Time a block and log it; the yielded dict may be filled with extra info"""
    from config.logging_config import log_performance_metric

    info: dict = {}
    start = time.perf_counter()
    try:
        yield info
    finally:
        execution_time = time.perf_counter() - start
        log_performance_metric(operation, execution_time, info)
        if execution_time > slow_threshold_s:
            logger.warning(f"Slow operation detected - {operation}: {execution_time:.2f}s")

"""
On-disk formats.

HRG1 (HRTF set), all little-endian::

    magic "HRG1" | version u16 | flags u16 | sample_rate u32 | n_directions u32
    | W u32 | grid kind u8 (0 equiangular, 1 explicit) | [n_az u16 | n_el u16]
    | directions f64 (az, el) x n_directions
    | magnitudes f32 [direction, ear, bin] linear
    | [delays f64 [direction, ear] seconds, when flags bit 0 is set]

HRC1 (checkpoint)::

    magic "HRC1" | version u16 | header length u32 | header JSON (UTF-8)
    | n_tensors u32 | per tensor: name length u16, name, ndim u8, dims u32 x ndim, f64 data
    | optimizer flag u8 | [per tensor, in the same order: first moment f64, second moment f64]
    | step u64
"""

import json
import logging
import os
import struct
from typing import Any, Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from models.config_models import ModelConfig, SHFitConfig
from models.hrtf_models import GridKind, HRTFSet, SphericalGrid, make_equiangular_grid, make_explicit_grid
from models.sh_transformer import ModelWeights, input_fit_config, parameter_specs
from nn.tensor import Tensor
from utils.exceptions import ContainerFormatError, InvalidArgumentError, UsageError
from utils.helpers import atomic_write_bytes

logger = logging.getLogger(__name__)

CONTAINER_MAGIC = b'HRG1'
CONTAINER_VERSION = 1
CHECKPOINT_MAGIC = b'HRC1'
CHECKPOINT_VERSION = 1

FLAG_DELAYS = 0x0001
KIND_CODES = {GridKind.EQUIANGULAR: 0, GridKind.EXPLICIT: 1}

_HEADER = struct.Struct('<4sHHIIIB')
_GRID_SHAPE = struct.Struct('<HH')


class _Cursor:
    """Sequential reader that reports the byte offset of every failure"""

    def __init__(self, payload: bytes, label: str):
        self.payload = payload
        self.offset = 0
        self.label = label

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.payload):
            raise ContainerFormatError(
                f"{self.label} truncated reading {what}: expected {end} bytes, got {len(self.payload)}",
                offset=self.offset,
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> tuple:
        return fmt.unpack(self.take(fmt.size, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize, what), dtype=dtype).astype(np.float64)

    def finish(self) -> None:
        if self.offset != len(self.payload):
            raise ContainerFormatError(
                f"{self.label} has {len(self.payload) - self.offset} trailing bytes", offset=self.offset
            )


def _check_overwrite(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


# HRG1

def encode_container(hrtf: HRTFSet) -> bytes:
    rate = float(hrtf.sample_rate_hz)
    if rate != round(rate) or not 0 < rate < 2 ** 32:
        raise InvalidArgumentError(f"sample rate {rate} cannot be stored as an unsigned 32-bit integer")
    grid = hrtf.grid
    flags = FLAG_DELAYS if hrtf.delays_s is not None else 0
    parts = [_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, flags, int(rate),
                          grid.n_directions, hrtf.n_bins, KIND_CODES[grid.kind])]
    if grid.is_equiangular:
        parts.append(_GRID_SHAPE.pack(grid.n_az, grid.n_el))
    directions = np.stack([grid.azimuth_deg, grid.elevation_deg], axis=1)
    parts.append(directions.astype('<f8').tobytes())
    parts.append(hrtf.magnitudes.astype('<f4').tobytes())
    if hrtf.delays_s is not None:
        parts.append(np.asarray(hrtf.delays_s).astype('<f8').tobytes())
    return b''.join(parts)


def decode_container(payload: bytes) -> HRTFSet:
    cursor = _Cursor(payload, "HRG1 container")
    magic = cursor.take(4, "magic")
    if magic != CONTAINER_MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}, expected {CONTAINER_MAGIC!r}", offset=0)
    cursor.offset = 0
    _, version, flags, rate, n_dir, n_bins, kind_code = cursor.unpack(_HEADER, "header")
    if version != CONTAINER_VERSION:
        raise ContainerFormatError(f"unsupported HRG1 version {version}", offset=4)
    if kind_code not in (0, 1):
        raise ContainerFormatError(f"unknown grid kind {kind_code}", offset=_HEADER.size - 1)
    if n_dir < 1 or n_bins < 2:
        raise ContainerFormatError(f"invalid counts: {n_dir} directions, {n_bins} bins", offset=12)

    shape = cursor.unpack(_GRID_SHAPE, "grid shape") if kind_code == 0 else None
    body = n_dir * 16 + n_dir * 2 * n_bins * 4 + (n_dir * 16 if flags & FLAG_DELAYS else 0)
    expected = cursor.offset + body
    if len(payload) < expected:
        raise ContainerFormatError(
            f"HRG1 body truncated: expected {expected} bytes, got {len(payload)}", offset=len(payload)
        )

    directions = cursor.array('<f8', 2 * n_dir, "directions").reshape(n_dir, 2)
    magnitudes = cursor.array('<f4', n_dir * 2 * n_bins, "magnitudes").reshape(n_dir, 2, n_bins)
    delays = cursor.array('<f8', 2 * n_dir, "delays").reshape(n_dir, 2) if flags & FLAG_DELAYS else None
    cursor.finish()

    grid = _restore_grid(directions, shape)
    try:
        return HRTFSet(grid=grid, sample_rate_hz=float(rate), magnitudes=magnitudes, delays_s=delays)
    except ValueError as e:
        raise ContainerFormatError(f"HRG1 content is invalid: {e}") from e


def _restore_grid(directions: np.ndarray, shape: Optional[tuple]) -> SphericalGrid:
    if shape is None:
        try:
            return make_explicit_grid(directions[:, 0], directions[:, 1])
        except ValueError as e:
            raise ContainerFormatError(f"invalid explicit grid: {e}") from e
    n_az, n_el = shape
    try:
        grid = make_equiangular_grid(n_az, n_el)
    except ValueError as e:
        raise ContainerFormatError(f"invalid equiangular grid {n_az}x{n_el}: {e}") from e
    stored = make_explicit_grid(directions[:, 0], directions[:, 1]) if grid.n_directions == len(directions) else None
    if stored is None or not grid.same_directions(stored):
        raise ContainerFormatError(f"stored directions do not form the {n_az}x{n_el} equiangular grid")
    return grid


def write_container(hrtf: HRTFSet, path: str, force: bool = True) -> None:
    _check_overwrite(path, force)
    atomic_write_bytes(path, encode_container(hrtf))
    logger.debug(f"Wrote {hrtf.n_directions}-direction container to {path}")


def read_container(path: str) -> HRTFSet:
    with open(path, 'rb') as handle:
        payload = handle.read()
    return decode_container(payload)


# HRC1

class Checkpoint(BaseModel):
    """Model weights plus optimizer state and training position"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    weights: ModelWeights
    step: int = Field(default=0, ge=0)
    adam_m: Optional[Dict[str, np.ndarray]] = None
    adam_v: Optional[Dict[str, np.ndarray]] = None
    meta: Dict[str, Any] = Field(default_factory=dict, description="Free-form run information")

    def fit_config(self, ridge_lambda: Optional[float] = None) -> SHFitConfig:
        """Input SH fit for inference: an explicit ridge weight, else the one the run trained with"""
        if ridge_lambda is None:
            ridge_lambda = self.meta.get('train_config', {}).get('ridge_lambda')
        return input_fit_config(self.weights.config, ridge_lambda)


def _pack_array(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype='<f8').tobytes()


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    weights = checkpoint.weights
    header = json.dumps({
        'model': weights.config.model_dump(mode='json'),
        'seed': weights.seed,
        'meta': checkpoint.meta,
    }, sort_keys=True).encode('utf-8')

    parts = [CHECKPOINT_MAGIC, struct.pack('<HI', CHECKPOINT_VERSION, len(header)), header,
             struct.pack('<I', len(weights.tensors))]
    for name, tensor in weights.parameters():
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded)) + encoded)
        parts.append(struct.pack('<B', tensor.ndim) + struct.pack(f'<{tensor.ndim}I', *tensor.shape))
        parts.append(_pack_array(tensor.data))

    has_state = checkpoint.adam_m is not None and checkpoint.adam_v is not None
    parts.append(struct.pack('<B', 1 if has_state else 0))
    if has_state:
        for name in weights.names():
            parts.append(_pack_array(checkpoint.adam_m[name]))
            parts.append(_pack_array(checkpoint.adam_v[name]))
    parts.append(struct.pack('<Q', checkpoint.step))
    return b''.join(parts)


def decode_checkpoint(payload: bytes) -> Checkpoint:
    cursor = _Cursor(payload, "HRC1 checkpoint")
    magic = cursor.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    version, header_len = struct.unpack('<HI', cursor.take(6, "version"))
    if version != CHECKPOINT_VERSION:
        raise ContainerFormatError(f"unsupported HRC1 version {version}", offset=4)
    header_offset = cursor.offset
    try:
        header = json.loads(cursor.take(header_len, "header").decode('utf-8'))
        config = ModelConfig(**header['model'])
    except (ValueError, KeyError, TypeError) as e:
        raise ContainerFormatError(f"invalid checkpoint header: {e}", offset=header_offset) from e

    (n_tensors,) = struct.unpack('<I', cursor.take(4, "tensor count"))
    tensors: Dict[str, Tensor] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack('<H', cursor.take(2, "name length"))
        name = cursor.take(name_len, "tensor name").decode('utf-8')
        (ndim,) = struct.unpack('<B', cursor.take(1, "rank"))
        shape = struct.unpack(f'<{ndim}I', cursor.take(4 * ndim, "shape"))
        count = int(np.prod(shape)) if shape else 1
        data = cursor.array('<f8', count, f"tensor {name}").reshape(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)

    (has_state,) = struct.unpack('<B', cursor.take(1, "optimizer flag"))
    adam_m = adam_v = None
    if has_state:
        adam_m, adam_v = {}, {}
        for name, tensor in tensors.items():
            adam_m[name] = cursor.array('<f8', tensor.size, f"first moment of {name}").reshape(tensor.shape)
            adam_v[name] = cursor.array('<f8', tensor.size, f"second moment of {name}").reshape(tensor.shape)
    (step,) = struct.unpack('<Q', cursor.take(8, "step"))
    cursor.finish()

    weights = ModelWeights(config=config, tensors=tensors, seed=int(header.get('seed', 0)))
    _check_weight_shapes(weights)
    return Checkpoint(weights=weights, step=step, adam_m=adam_m, adam_v=adam_v, meta=header.get('meta', {}))


def _check_weight_shapes(weights: ModelWeights) -> None:
    specs = parameter_specs(weights.config)
    if list(specs) != weights.names():
        raise ContainerFormatError("checkpoint tensors do not match the stored model configuration")
    for name, (shape, _) in specs.items():
        if weights[name].shape != shape:
            raise ContainerFormatError(f"tensor {name} has shape {weights[name].shape}, expected {shape}")


def write_checkpoint(checkpoint: Checkpoint, path: str, force: bool = True) -> None:
    _check_overwrite(path, force)
    atomic_write_bytes(path, encode_checkpoint(checkpoint))
    logger.info(f"Saved checkpoint at step {checkpoint.step} to {path}")


def read_checkpoint(path: str) -> Checkpoint:
    with open(path, 'rb') as handle:
        payload = handle.read()
    return decode_checkpoint(payload)

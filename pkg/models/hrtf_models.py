"""
Direction grids, HRTF containers and the neighbor topology of equiangular grids.

Angles are in degrees. Azimuth runs counter-clockwise from the front
(azimuth 0, elevation 0) and elevation is measured from the horizontal plane.
Magnitudes are stored linear; dB conversion happens in losses and metrics.
"""

from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial import cKDTree

from utils.exceptions import InvalidArgumentError, UnsupportedTopologyError

MAGNITUDE_FLOOR = 1e-6
SPARSITY_LEVELS = (3, 5, 19, 100)

# Chord length of a 1e-9 degree separation on the unit sphere
_MIN_CHORD = 2.0 * np.sin(np.deg2rad(1e-9) / 2.0)


def _normalize_azimuth(values: np.ndarray) -> np.ndarray:
    wrapped = np.mod(values, 360.0)
    # np.mod can round tiny negatives up to exactly 360.0
    wrapped[wrapped >= 360.0] = 0.0
    return wrapped


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _coerce_magnitude_array(value) -> np.ndarray:
    array = np.array(value, dtype=np.float64)
    if array.ndim != 3 or array.shape[1] != 2:
        raise ValueError(f"magnitudes must have shape [n, 2, W], got {array.shape}")
    if array.shape[2] < 2:
        raise ValueError("at least two frequency bins are required")
    if not np.all(np.isfinite(array)):
        raise ValueError("magnitudes must be finite")
    return _frozen(np.maximum(array, MAGNITUDE_FLOOR))


def _coerce_delay_array(value) -> Optional[np.ndarray]:
    if value is None:
        return None
    array = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise ValueError("delays must be finite")
    return _frozen(array)


class GridKind(str, Enum):
    """How a grid was constructed"""
    EQUIANGULAR = "equiangular"
    EXPLICIT = "explicit"


class Ear(int, Enum):
    """Ear axis index of magnitude arrays"""
    LEFT = 0
    RIGHT = 1


class Direction(BaseModel):
    """A single direction on the sphere"""
    model_config = ConfigDict(frozen=True)

    azimuth_deg: float = Field(..., description="Azimuth in degrees, normalized into [0, 360)")
    elevation_deg: float = Field(..., ge=-90.0, le=90.0, description="Elevation in degrees")

    @field_validator('azimuth_deg')
    @classmethod
    def _wrap_azimuth(cls, value: float) -> float:
        return float(_normalize_azimuth(np.array([value], dtype=np.float64))[0])


class SphericalGrid(BaseModel):
    """Ordered list of directions, with neighbor topology for equiangular grids"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    azimuth_deg: np.ndarray = Field(..., description="Azimuths in [0, 360)")
    elevation_deg: np.ndarray = Field(..., description="Elevations in [-90, 90]")
    kind: GridKind = Field(default=GridKind.EXPLICIT)
    n_az: Optional[int] = Field(default=None, description="Azimuth count (equiangular only)")
    n_el: Optional[int] = Field(default=None, description="Elevation row count (equiangular only)")
    neighbor_table: Optional[Tuple[Tuple[int, ...], ...]] = Field(
        default=None, description="Per-index neighbors in (top, bottom, left, right) order"
    )

    @field_validator('azimuth_deg', mode='before')
    @classmethod
    def _coerce_azimuth(cls, value) -> np.ndarray:
        array = np.array(value, dtype=np.float64).reshape(-1)
        return _frozen(_normalize_azimuth(array))

    @field_validator('elevation_deg', mode='before')
    @classmethod
    def _coerce_elevation(cls, value) -> np.ndarray:
        array = np.array(value, dtype=np.float64).reshape(-1)
        if np.any(array < -90.0) or np.any(array > 90.0) or not np.all(np.isfinite(array)):
            raise ValueError("elevations must lie in [-90, 90]")
        return _frozen(array)

    @model_validator(mode='after')
    def _check_grid(self) -> 'SphericalGrid':
        if self.azimuth_deg.shape != self.elevation_deg.shape:
            raise ValueError("azimuth and elevation arrays must have equal length")
        if self.azimuth_deg.size == 0:
            raise ValueError("a grid needs at least one direction")
        pairs = cKDTree(self.unit_vectors()).query_pairs(r=_MIN_CHORD)
        if pairs:
            first, second = sorted(pairs)[0]
            raise ValueError(f"directions {first} and {second} coincide")
        if self.kind == GridKind.EXPLICIT and self.neighbor_table is not None:
            raise ValueError("explicit grids carry no neighbor table")
        if self.kind == GridKind.EQUIANGULAR:
            if self.n_az is None or self.n_el is None or self.neighbor_table is None:
                raise ValueError("equiangular grids need n_az, n_el and a neighbor table")
            if self.n_az * self.n_el != self.azimuth_deg.size:
                raise ValueError("n_az * n_el must equal the direction count")
        return self

    @property
    def n_directions(self) -> int:
        return int(self.azimuth_deg.size)

    @property
    def directions(self) -> List[Direction]:
        return [
            Direction(azimuth_deg=float(az), elevation_deg=float(el))
            for az, el in zip(self.azimuth_deg, self.elevation_deg)
        ]

    @property
    def is_equiangular(self) -> bool:
        return self.kind == GridKind.EQUIANGULAR

    def unit_vectors(self) -> np.ndarray:
        return unit_vectors(self.azimuth_deg, self.elevation_deg)

    def same_directions(self, other: 'SphericalGrid', atol: float = 1e-9) -> bool:
        if self.n_directions != other.n_directions:
            return False
        return bool(
            np.all(np.abs(self.elevation_deg - other.elevation_deg) <= atol)
            and np.all(np.abs(_wrap_difference(self.azimuth_deg, other.azimuth_deg)) <= atol)
        )

    def describe(self) -> str:
        if self.is_equiangular:
            return f"equiangular {self.n_az}x{self.n_el}"
        return f"explicit ({self.n_directions} directions)"


class HRTFSet(BaseModel):
    """Per-direction, per-ear linear magnitude spectra tied to a grid"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: SphericalGrid
    sample_rate_hz: float = Field(..., gt=0, description="Sampling rate the bins refer to")
    magnitudes: np.ndarray = Field(..., description="[n_directions x 2 ears x W] linear magnitudes")
    delays_s: Optional[np.ndarray] = Field(
        default=None, description="Optional [n_directions x 2] onset delays in seconds"
    )

    @field_validator('magnitudes', mode='before')
    @classmethod
    def _coerce_magnitudes(cls, value) -> np.ndarray:
        return _coerce_magnitude_array(value)

    @field_validator('delays_s', mode='before')
    @classmethod
    def _coerce_delays(cls, value) -> Optional[np.ndarray]:
        return _coerce_delay_array(value)

    @model_validator(mode='after')
    def _check_shapes(self) -> 'HRTFSet':
        if self.magnitudes.shape[0] != self.grid.n_directions:
            raise ValueError(
                f"magnitudes describe {self.magnitudes.shape[0]} directions, "
                f"grid has {self.grid.n_directions}"
            )
        if self.delays_s is not None and self.delays_s.shape != (self.grid.n_directions, 2):
            raise ValueError(f"delays must have shape [{self.grid.n_directions}, 2]")
        return self

    @property
    def n_directions(self) -> int:
        return self.grid.n_directions

    @property
    def n_bins(self) -> int:
        return int(self.magnitudes.shape[2])

    @property
    def frequencies_hz(self) -> np.ndarray:
        return bin_frequencies(self.n_bins, self.sample_rate_hz)

    @property
    def magnitudes_db(self) -> np.ndarray:
        return 20.0 * np.log10(self.magnitudes)

    def with_magnitudes(self, magnitudes: np.ndarray) -> 'HRTFSet':
        return HRTFSet(grid=self.grid, sample_rate_hz=self.sample_rate_hz,
                       magnitudes=magnitudes, delays_s=self.delays_s)


class SparseMeasurement(BaseModel):
    """A sparse subset of measured directions at one sparsity level"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: SphericalGrid
    sample_rate_hz: float = Field(..., gt=0)
    magnitudes: np.ndarray
    sparsity_level: int = Field(..., description="One of 3, 5, 19, 100")
    source_indices: Optional[Tuple[int, ...]] = Field(
        default=None, description="Indices of the selected directions in the full grid"
    )
    delays_s: Optional[np.ndarray] = None

    @field_validator('magnitudes', mode='before')
    @classmethod
    def _coerce_magnitudes(cls, value) -> np.ndarray:
        return _coerce_magnitude_array(value)

    @field_validator('delays_s', mode='before')
    @classmethod
    def _coerce_delays(cls, value) -> Optional[np.ndarray]:
        return _coerce_delay_array(value)

    @model_validator(mode='after')
    def _check_level(self) -> 'SparseMeasurement':
        if self.sparsity_level not in SPARSITY_LEVELS:
            raise ValueError(f"sparsity level must be one of {SPARSITY_LEVELS}")
        if self.grid.n_directions != self.sparsity_level:
            raise ValueError(
                f"sparsity level {self.sparsity_level} needs exactly that many directions, "
                f"got {self.grid.n_directions}"
            )
        if self.magnitudes.shape[0] != self.grid.n_directions:
            raise ValueError("magnitudes and grid disagree on the direction count")
        if self.grid.is_equiangular:
            raise ValueError("sparse measurements use explicit grids")
        return self

    @property
    def n_directions(self) -> int:
        return self.grid.n_directions

    @property
    def n_bins(self) -> int:
        return int(self.magnitudes.shape[2])

    def as_hrtf_set(self) -> HRTFSet:
        return HRTFSet(grid=self.grid, sample_rate_hz=self.sample_rate_hz,
                       magnitudes=self.magnitudes, delays_s=self.delays_s)


def bin_frequencies(n_bins: int, sample_rate_hz: float) -> np.ndarray:
    """Bin centre frequencies k * fs / (2W) for k = 1..W (DC excluded)"""
    k = np.arange(1, n_bins + 1, dtype=np.float64)
    return k * sample_rate_hz / (2.0 * n_bins)


def unit_vectors(azimuth_deg: np.ndarray, elevation_deg: np.ndarray) -> np.ndarray:
    az = np.deg2rad(np.asarray(azimuth_deg, dtype=np.float64))
    el = np.deg2rad(np.asarray(elevation_deg, dtype=np.float64))
    cos_el = np.cos(el)
    return np.stack([cos_el * np.cos(az), cos_el * np.sin(az), np.sin(el)], axis=-1)


def great_circle_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise great-circle distances (radians) between two sets of unit vectors"""
    dots = np.clip(np.asarray(a) @ np.asarray(b).T, -1.0, 1.0)
    return np.arccos(dots)


def _wrap_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (np.asarray(a) - np.asarray(b) + 180.0) % 360.0 - 180.0


def make_equiangular_grid(n_az: int, n_el: int) -> SphericalGrid:
    """
    Equiangular grid with pole-avoiding elevation rows.

    Index ``row * n_az + col`` holds azimuth ``col * 360 / n_az`` and elevation
    ``-90 + (row + 0.5) * 180 / n_el``; row 0 is the lowest row. Left/right
    neighbors wrap in azimuth, top/bottom neighbors are absent at the extreme rows.
    """
    if int(n_az) != n_az or int(n_el) != n_el:
        raise InvalidArgumentError("grid counts must be integers")
    n_az, n_el = int(n_az), int(n_el)
    if n_az < 3:
        raise InvalidArgumentError(f"n_az must be at least 3, got {n_az}")
    if n_el < 2:
        raise InvalidArgumentError(f"n_el must be at least 2, got {n_el}")

    azimuths = np.arange(n_az, dtype=np.float64) * (360.0 / n_az)
    elevations = -90.0 + (np.arange(n_el, dtype=np.float64) + 0.5) * (180.0 / n_el)
    az_grid = np.tile(azimuths, n_el)
    el_grid = np.repeat(elevations, n_az)

    table = []
    for row in range(n_el):
        for col in range(n_az):
            entry = []
            if row + 1 < n_el:
                entry.append((row + 1) * n_az + col)  # top
            if row > 0:
                entry.append((row - 1) * n_az + col)  # bottom
            entry.append(row * n_az + (col - 1) % n_az)  # left
            entry.append(row * n_az + (col + 1) % n_az)  # right
            table.append(tuple(entry))

    return SphericalGrid(
        azimuth_deg=az_grid,
        elevation_deg=el_grid,
        kind=GridKind.EQUIANGULAR,
        n_az=n_az,
        n_el=n_el,
        neighbor_table=tuple(table),
    )


def make_explicit_grid(azimuth_deg: Sequence[float], elevation_deg: Sequence[float]) -> SphericalGrid:
    return SphericalGrid(azimuth_deg=azimuth_deg, elevation_deg=elevation_deg, kind=GridKind.EXPLICIT)


def subset_grid(grid: SphericalGrid, indices: Sequence[int]) -> SphericalGrid:
    """Explicit grid made of the selected directions of ``grid``"""
    idx = np.asarray(indices, dtype=np.int64)
    return make_explicit_grid(grid.azimuth_deg[idx], grid.elevation_deg[idx])


def neighbors(grid: SphericalGrid, index: int) -> List[int]:
    """Neighbor set K(index) of an equiangular grid"""
    if not grid.is_equiangular or grid.neighbor_table is None:
        raise UnsupportedTopologyError("neighbor topology is only defined for equiangular grids")
    if not 0 <= index < grid.n_directions:
        raise InvalidArgumentError(f"index {index} outside [0, {grid.n_directions})")
    return list(grid.neighbor_table[index])


def row_col(grid: SphericalGrid, index: int) -> Tuple[int, int]:
    if not grid.is_equiangular:
        raise UnsupportedTopologyError("rows and columns exist only on equiangular grids")
    return divmod(int(index), int(grid.n_az))


def neighbor_average_matrix(grid: SphericalGrid) -> np.ndarray:
    """Dense N x N matrix whose row n averages the neighbors of n"""
    if not grid.is_equiangular or grid.neighbor_table is None:
        raise UnsupportedTopologyError("neighbor averaging needs an equiangular grid")
    n = grid.n_directions
    matrix = np.zeros((n, n), dtype=np.float64)
    for index, entry in enumerate(grid.neighbor_table):
        matrix[index, list(entry)] = 1.0 / len(entry)
    return matrix


def nearest_direction(grid: SphericalGrid, azimuth_deg: float, elevation_deg: float) -> int:
    """Index of the grid direction closest to the given one (lowest index on ties)"""
    target = unit_vectors(np.array([azimuth_deg]), np.array([elevation_deg]))
    distances = great_circle_distances(grid.unit_vectors(), target)[:, 0]
    return int(np.argmin(distances))


class SHCoefficients(BaseModel):
    """
    Real SH coefficients per ear and frequency bin.

    ``values[ear, bin, j]`` holds the coefficient of degree ``l`` and order ``m``
    at flat index ``j = l * l + l + m``.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    order_max: int = Field(..., ge=0, description="Maximum SH degree L")
    values: np.ndarray = Field(..., description="[2 ears x W bins x (L+1)^2] coefficients in dB units")
    sample_rate_hz: float = Field(default=48000.0, gt=0)

    @field_validator('values', mode='before')
    @classmethod
    def _coerce_values(cls, value) -> np.ndarray:
        array = np.array(value, dtype=np.float64)
        if array.ndim != 3 or array.shape[0] != 2:
            raise ValueError(f"coefficients must have shape [2, W, K], got {array.shape}")
        if not np.all(np.isfinite(array)):
            raise ValueError("coefficients must be finite")
        return _frozen(array)

    @model_validator(mode='after')
    def _check_count(self) -> 'SHCoefficients':
        expected = (self.order_max + 1) ** 2
        if self.values.shape[2] != expected:
            raise ValueError(f"order {self.order_max} needs {expected} coefficients, got {self.values.shape[2]}")
        return self

    @property
    def n_bins(self) -> int:
        return int(self.values.shape[1])

    @property
    def n_coefficients(self) -> int:
        return int(self.values.shape[2])

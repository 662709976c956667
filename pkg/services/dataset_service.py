"""
Dataset directories and the CSV interchange format.

A dataset directory holds ``<subject>.hrg`` ground-truth containers and,
optionally, ``<subject>_L<level>.hrg`` sparse containers. Missing sparse
files are derived from the ground truth by farthest-point selection.

The CSV format has one row per (direction, ear, bin) with columns
azimuth, elevation, ear, bin, magnitude_db; ``bin`` counts from 1.
"""

import glob
import logging
import os
import re
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from models.hrtf_models import (
    Ear,
    HRTFSet,
    SparseMeasurement,
    SphericalGrid,
    make_explicit_grid,
    nearest_direction,
)
from services.container_service import read_container, write_container
from services.metrics_service import per_direction_lsd
from services.synth_service import make_sparse
from utils.exceptions import InvalidDatasetError

logger = logging.getLogger(__name__)

CONTAINER_SUFFIX = '.hrg'
CSV_COLUMNS = ['azimuth', 'elevation', 'ear', 'bin', 'magnitude_db']
_SPARSE_NAME = re.compile(r'^(?P<subject>.+)_L(?P<level>\d+)$')
_EAR_NAMES = {'left': Ear.LEFT, 'right': Ear.RIGHT, 'l': Ear.LEFT, 'r': Ear.RIGHT, '0': Ear.LEFT, '1': Ear.RIGHT}


class DatasetEntry(BaseModel):
    """One subject at one sparsity level"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    subject: str
    ground_truth: HRTFSet
    sparse: SparseMeasurement


def subject_path(data_dir: str, subject: str, level: Optional[int] = None) -> str:
    name = subject if level is None else f"{subject}_L{level}"
    return os.path.join(data_dir, name + CONTAINER_SUFFIX)


def list_subjects(data_dir: str) -> List[str]:
    """Ground-truth subject names in sorted order"""
    if not os.path.isdir(data_dir):
        raise InvalidDatasetError(f"dataset directory {data_dir} does not exist")
    subjects, sparse_only = [], []
    for path in sorted(glob.glob(os.path.join(data_dir, '*' + CONTAINER_SUFFIX))):
        stem = os.path.splitext(os.path.basename(path))[0]
        match = _SPARSE_NAME.match(stem)
        if match:
            sparse_only.append(match.group('subject'))
        else:
            subjects.append(stem)
    orphans = sorted(set(sparse_only) - set(subjects))
    if orphans:
        raise InvalidDatasetError(f"missing ground truth for subjects: {', '.join(orphans)}")
    if not subjects:
        raise InvalidDatasetError(f"no ground-truth containers in {data_dir}")
    return subjects


def sparse_from_set(hrtf: HRTFSet, level: int) -> SparseMeasurement:
    if hrtf.n_directions != level:
        raise InvalidDatasetError(f"sparse container has {hrtf.n_directions} directions, expected {level}")
    grid = make_explicit_grid(hrtf.grid.azimuth_deg, hrtf.grid.elevation_deg)
    return SparseMeasurement(grid=grid, sample_rate_hz=hrtf.sample_rate_hz, magnitudes=hrtf.magnitudes,
                             sparsity_level=level, delays_s=hrtf.delays_s)


def load_entry(data_dir: str, subject: str, level: int) -> DatasetEntry:
    truth_path = subject_path(data_dir, subject)
    if not os.path.exists(truth_path):
        raise InvalidDatasetError(f"missing ground truth for subject {subject}")
    truth = read_container(truth_path)
    sparse_path = subject_path(data_dir, subject, level)
    if os.path.exists(sparse_path):
        sparse = sparse_from_set(read_container(sparse_path), level)
    else:
        sparse = make_sparse(truth, level)
    return DatasetEntry(subject=subject, ground_truth=truth, sparse=sparse)


def load_dataset(data_dir: str, level: int) -> List[DatasetEntry]:
    entries = [load_entry(data_dir, subject, level) for subject in list_subjects(data_dir)]
    logger.info(f"Loaded {len(entries)} subjects at sparsity level {level} from {data_dir}")
    return entries


def write_sparse(sparse: SparseMeasurement, path: str, force: bool = True) -> None:
    write_container(sparse.as_hrtf_set(), path, force=force)


# CSV interchange

def import_csv(path_or_buffer, sample_rate_hz: float, grid: Optional[SphericalGrid] = None) -> HRTFSet:
    """
    Build an HRTFSet from the CSV intermediate.

    With ``grid`` every row is assigned to the nearest grid direction;
    otherwise directions form an explicit grid in order of first appearance.
    """
    frame = pd.read_csv(path_or_buffer)
    missing = [c for c in CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise InvalidDatasetError(f"CSV lacks columns: {', '.join(missing)}")
    if frame.empty:
        raise InvalidDatasetError("CSV has no rows")

    ears = frame['ear'].astype(str).str.strip().str.lower().map(_EAR_NAMES)
    if ears.isna().any():
        raise InvalidDatasetError("ear column must hold left/right or 0/1")
    frame = frame.assign(ear_index=ears.map(lambda e: int(e)))

    pairs = frame[['azimuth', 'elevation']].drop_duplicates()
    if grid is None:
        grid = make_explicit_grid(pairs['azimuth'].to_numpy(), pairs['elevation'].to_numpy())
    lookup = {
        (az, el): nearest_direction(grid, az, el)
        for az, el in pairs.itertuples(index=False, name=None)
    }
    direction = [lookup[(az, el)] for az, el in frame[['azimuth', 'elevation']].itertuples(index=False, name=None)]
    frame = frame.assign(direction=direction)

    n_bins = int(frame['bin'].max())
    if int(frame['bin'].min()) < 1:
        raise InvalidDatasetError("bin numbers start at 1")
    if frame.duplicated(['direction', 'ear_index', 'bin']).any():
        raise InvalidDatasetError("CSV repeats a (direction, ear, bin) cell")
    expected = grid.n_directions * 2 * n_bins
    if len(frame) != expected:
        raise InvalidDatasetError(f"CSV has {len(frame)} rows, a complete set needs {expected}")

    values_db = np.empty((grid.n_directions, 2, n_bins), dtype=np.float64)
    values_db[frame['direction'].to_numpy(), frame['ear_index'].to_numpy(),
              frame['bin'].to_numpy(dtype=np.int64) - 1] = frame['magnitude_db'].to_numpy(dtype=np.float64)
    return HRTFSet(grid=grid, sample_rate_hz=sample_rate_hz, magnitudes=10.0 ** (values_db / 20.0))


def export_frame(hrtf: HRTFSet, median_plane: bool = False, reference: Optional[HRTFSet] = None) -> pd.DataFrame:
    """
    Long table of dB magnitudes: azimuth, elevation, ear, bin, frequency_hz,
    magnitude_db, plus lsd_db per direction when a reference is given.
    """
    n_dir, _, n_bins = hrtf.magnitudes.shape
    directions = np.arange(n_dir)
    if median_plane:
        az = hrtf.grid.azimuth_deg
        on_plane = np.isclose(az, 0.0, atol=1e-9) | np.isclose(az, 180.0, atol=1e-9) | np.isclose(az, 360.0, atol=1e-9)
        directions = directions[on_plane]

    d_idx, e_idx, b_idx = np.meshgrid(directions, np.arange(2), np.arange(n_bins), indexing='ij')
    d_idx, e_idx, b_idx = d_idx.ravel(), e_idx.ravel(), b_idx.ravel()
    frame = pd.DataFrame({
        'azimuth': hrtf.grid.azimuth_deg[d_idx],
        'elevation': hrtf.grid.elevation_deg[d_idx],
        'ear': np.where(e_idx == 0, 'left', 'right'),
        'bin': b_idx + 1,
        'frequency_hz': hrtf.frequencies_hz[b_idx],
        'magnitude_db': hrtf.magnitudes_db[d_idx, e_idx, b_idx],
    })
    if reference is not None:
        frame['lsd_db'] = per_direction_lsd(hrtf, reference)[d_idx]
    return frame

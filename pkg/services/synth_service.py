"""
Seeded synthetic HRTF subjects and sparse direction subsets.

Every random draw comes from a counter-based generator addressed by
(seed, stream, bin), so subjects are reproducible without global state.
"""

import logging
from typing import List, Optional, Sequence

import numpy as np
from scipy.ndimage import convolve1d

from models.config_models import SynthConfig
from models.hrtf_models import (
    SPARSITY_LEVELS,
    HRTFSet,
    SHCoefficients,
    SparseMeasurement,
    SphericalGrid,
    great_circle_distances,
    make_equiangular_grid,
    nearest_direction,
    subset_grid,
)
from services.sht_service import degree_of_indices, eval_sh, n_coefficients
from utils.exceptions import InvalidArgumentError
from utils.helpers import counter_generator

logger = logging.getLogger(__name__)

BIN_SMOOTHING_KERNEL = np.array([0.25, 0.5, 0.25])

# Generator streams: one field shared by both ears, one specific to each ear
SHARED_STREAM = 0
EAR_STREAMS = (1, 2)

# Strict-improvement threshold of the sparse-subset swap polish (radians)
_SWAP_TOLERANCE = 1e-12


def degree_std(cfg: SynthConfig) -> np.ndarray:
    """Per-coefficient standard deviation: level_db * sqrt((1 / (1 + l))^decay)"""
    degrees = degree_of_indices(cfg.band_limit).astype(np.float64)
    variance = (1.0 / (1.0 + degrees)) ** cfg.degree_decay
    return cfg.level_db * np.sqrt(variance)


def _draw_stream(cfg: SynthConfig, stream: int) -> np.ndarray:
    n_coeffs = n_coefficients(cfg.band_limit)
    draws = np.empty((cfg.n_bins, n_coeffs), dtype=np.float64)
    for bin_index in range(cfg.n_bins):
        rng = counter_generator(cfg.seed, stream, bin_index)
        draws[bin_index] = rng.standard_normal(n_coeffs)
    return draws


def generate_coefficients(cfg: SynthConfig) -> SHCoefficients:
    """Band-limited dB coefficients of one synthetic subject, smoothed across bins"""
    std = degree_std(cfg)
    shared = _draw_stream(cfg, SHARED_STREAM)
    mix_shared = np.sqrt(1.0 - cfg.interaural_asymmetry)
    mix_ear = np.sqrt(cfg.interaural_asymmetry)

    values = np.empty((2, cfg.n_bins, std.size), dtype=np.float64)
    for ear, stream in enumerate(EAR_STREAMS):
        specific = _draw_stream(cfg, stream)
        values[ear] = (mix_shared * shared + mix_ear * specific) * std

    # Smoothing acts along frequency only, so each bin stays spatially band-limited
    values = convolve1d(values, BIN_SMOOTHING_KERNEL, axis=1, mode='nearest')
    return SHCoefficients(order_max=cfg.band_limit, values=values, sample_rate_hz=cfg.sample_rate_hz)


def generate_subject(cfg: SynthConfig, grid: Optional[SphericalGrid] = None) -> HRTFSet:
    """Synthesize one subject on ``grid`` (default: the equiangular grid of ``cfg``)"""
    target = grid if grid is not None else make_equiangular_grid(cfg.n_az, cfg.n_el)
    subject = eval_sh(generate_coefficients(cfg), target)
    logger.debug(f"Generated synthetic subject seed={cfg.seed} on {target.describe()}")
    return subject


def generate_dataset(cfg: SynthConfig, n_subjects: int) -> List[HRTFSet]:
    """Subjects 0..n-1; subject i uses seed cfg.seed + i"""
    if n_subjects < 1:
        raise InvalidArgumentError(f"n_subjects must be positive, got {n_subjects}")
    grid = make_equiangular_grid(cfg.n_az, cfg.n_el)
    subjects = [generate_subject(cfg.model_copy(update={'seed': cfg.seed + i}), grid) for i in range(n_subjects)]
    logger.info(f"Generated {n_subjects} synthetic subjects from seed {cfg.seed}")
    return subjects


def _min_pairwise(distances: np.ndarray, members: Sequence[int]) -> float:
    members = np.asarray(members)
    if members.size < 2:
        return np.inf
    block = distances[np.ix_(members, members)]
    upper = np.triu_indices(members.size, k=1)
    return float(block[upper].min())


def farthest_point_indices(grid: SphericalGrid, count: int) -> List[int]:
    """Greedy farthest-point order starting nearest to (0, 0); ties go to the lower index"""
    distances = great_circle_distances(grid.unit_vectors(), grid.unit_vectors())
    selected = [nearest_direction(grid, 0.0, 0.0)]
    closest = distances[selected[0]].copy()
    while len(selected) < count:
        closest_masked = closest.copy()
        closest_masked[selected] = -np.inf
        choice = int(np.argmax(closest_masked))
        selected.append(choice)
        closest = np.minimum(closest, distances[choice])
    return selected


def _polish_by_swaps(distances: np.ndarray, selected: List[int]) -> List[int]:
    """Apply single swaps while any swap strictly raises the minimum pairwise distance"""
    selected = list(selected)
    n_total = distances.shape[0]
    improved = True
    while improved:
        improved = False
        current = _min_pairwise(distances, selected)
        for slot in range(len(selected)):
            others = selected[:slot] + selected[slot + 1:]
            base = _min_pairwise(distances, others)
            candidate = distances[:, others].min(axis=1) if others else np.full(n_total, np.inf)
            candidate = candidate.copy()
            candidate[selected] = -np.inf
            best = int(np.argmax(candidate))
            if min(base, candidate[best]) > current + _SWAP_TOLERANCE:
                selected[slot] = best
                improved = True
                break
    return selected


def select_sparse_indices(grid: SphericalGrid, level: int) -> List[int]:
    """Sorted indices of ``level`` well-spread directions of ``grid``"""
    if level > grid.n_directions:
        raise InvalidArgumentError(
            f"sparsity level {level} exceeds the {grid.n_directions} available directions"
        )
    if level == grid.n_directions:
        return list(range(level))
    selected = farthest_point_indices(grid, level)
    distances = great_circle_distances(grid.unit_vectors(), grid.unit_vectors())
    return sorted(_polish_by_swaps(distances, selected))


def make_sparse(full: HRTFSet, level: int, scheme_seed: int = 0) -> SparseMeasurement:
    """
    Keep ``level`` directions of ``full`` chosen by farthest-point sampling.

    ``scheme_seed`` is reserved for randomized selection schemes and does not
    affect the deterministic farthest-point selection.
    """
    if level not in SPARSITY_LEVELS:
        raise InvalidArgumentError(f"sparsity level must be one of {SPARSITY_LEVELS}, got {level}")
    indices = select_sparse_indices(full.grid, level)
    delays = full.delays_s[indices] if full.delays_s is not None else None
    logger.debug(f"Selected sparse directions {indices} (scheme seed {scheme_seed})")
    return SparseMeasurement(
        grid=subset_grid(full.grid, indices),
        sample_rate_hz=full.sample_rate_hz,
        magnitudes=full.magnitudes[indices],
        sparsity_level=level,
        source_indices=tuple(int(i) for i in indices),
        delays_s=delays,
    )

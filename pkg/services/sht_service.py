"""
Real spherical-harmonic basis, ridge-regularized forward transform and synthesis.

Conventions
-----------
* Polar angle is ``90 deg - elevation``, so ``x = cos(polar) = sin(elevation)``.
* Associated Legendre functions include the Condon-Shortley phase ``(-1)^m``.
* The real basis is obtained from the complex ``e^{j m azimuth}`` basis by the
  exact change of basis
  ``Y_l^m = sqrt(2) N_l^|m| P_l^|m|(x) cos(m az)`` for ``m > 0``,
  ``Y_l^0 = N_l^0 P_l(x)`` and
  ``Y_l^m = sqrt(2) N_l^|m| P_l^|m|(x) sin(|m| az)`` for ``m < 0``,
  with ``N_l^m = sqrt((2l + 1) / (4 pi) * (l - m)! / (l + m)!)``. The result is
  orthonormal on the unit sphere.
* Coefficients are stored at flat index ``l * l + l + m``.
* Fitting happens on dB magnitudes; synthesis returns linear magnitudes.
"""

import logging
import math
from typing import Tuple, Union

import numpy as np
import scipy.linalg

from models.config_models import SHFitConfig
from models.hrtf_models import (
    Direction,
    Ear,
    HRTFSet,
    SHCoefficients,
    SparseMeasurement,
    SphericalGrid,
)
from utils.exceptions import IllConditionedFitError, InvalidArgumentError

logger = logging.getLogger(__name__)

# Relative singular-value threshold below which an unregularized fit is rejected
RANK_TOLERANCE = 1e-7


def sh_index(l: int, m: int) -> int:
    """Flat coefficient index of degree l, order m"""
    if l < 0 or abs(m) > l:
        raise InvalidArgumentError(f"invalid SH pair (l={l}, m={m})")
    return l * l + l + m


def sh_degree_order(index: int) -> Tuple[int, int]:
    """Inverse of sh_index"""
    if index < 0:
        raise InvalidArgumentError(f"negative SH index {index}")
    l = math.isqrt(index)
    return l, index - l * l - l


def n_coefficients(order: int) -> int:
    return (order + 1) ** 2


def degree_of_indices(order: int) -> np.ndarray:
    """Degree l of every flat index up to ``order``"""
    return np.concatenate([np.full(2 * l + 1, l) for l in range(order + 1)])


def assoc_legendre(l: int, m: int, x):
    """
    Associated Legendre function P_l^m(x) with the Condon-Shortley phase.

    Uses the upward three-term recurrence in l starting from the closed form
    P_m^m(x) = (-1)^m (2m - 1)!! (1 - x^2)^(m/2).
    """
    if l < 0 or m < 0 or m > l:
        raise InvalidArgumentError(f"assoc_legendre needs 0 <= m <= l, got l={l}, m={m}")
    x_arr = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x_arr) > 1.0):
        raise InvalidArgumentError("assoc_legendre needs |x| <= 1")

    somx2 = np.sqrt((1.0 - x_arr) * (1.0 + x_arr))
    p_mm = np.ones_like(x_arr)
    fact = 1.0
    for _ in range(m):
        p_mm = -p_mm * fact * somx2
        fact += 2.0
    if l == m:
        result = p_mm
    else:
        p_m1m = x_arr * (2 * m + 1) * p_mm
        if l == m + 1:
            result = p_m1m
        else:
            p_prev, p_curr = p_mm, p_m1m
            for ll in range(m + 2, l + 1):
                p_next = ((2 * ll - 1) * x_arr * p_curr - (ll + m - 1) * p_prev) / (ll - m)
                p_prev, p_curr = p_curr, p_next
            result = p_curr
    if np.ndim(result) == 0:
        return float(result)
    return result


def _normalized_legendre(order: int, x: np.ndarray) -> np.ndarray:
    """
    Table Q[l, m, n] = N_l^m P_l^m(x_n) for 0 <= m <= l <= order.

    Computed with the fully normalized recurrences so no factorials appear.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.clip((1.0 - x) * (1.0 + x), 0.0, None))
    table = np.zeros((order + 1, order + 1, x.size), dtype=np.float64)
    table[0, 0] = math.sqrt(1.0 / (4.0 * math.pi))
    for m in range(1, order + 1):
        table[m, m] = -math.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * table[m - 1, m - 1]
    for m in range(0, order):
        table[m + 1, m] = x * math.sqrt(2.0 * m + 3.0) * table[m, m]
    for m in range(0, order + 1):
        for l in range(m + 2, order + 1):
            a = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = math.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            table[l, m] = a * (x * table[l - 1, m] - b * table[l - 2, m])
    return table


def _real_basis(order: int, azimuth_deg: np.ndarray, elevation_deg: np.ndarray) -> np.ndarray:
    az = np.deg2rad(np.asarray(azimuth_deg, dtype=np.float64))
    x = np.sin(np.deg2rad(np.asarray(elevation_deg, dtype=np.float64)))
    table = _normalized_legendre(order, x)
    basis = np.empty((az.size, n_coefficients(order)), dtype=np.float64)
    root2 = math.sqrt(2.0)
    for l in range(order + 1):
        basis[:, sh_index(l, 0)] = table[l, 0]
        for m in range(1, l + 1):
            basis[:, sh_index(l, m)] = root2 * table[l, m] * np.cos(m * az)
            basis[:, sh_index(l, -m)] = root2 * table[l, m] * np.sin(m * az)
    return basis


def real_sh(l: int, m: int, direction: Direction) -> float:
    """Orthonormal real SH Y_l^m at a direction"""
    if l < 0 or abs(m) > l:
        raise InvalidArgumentError(f"real_sh needs |m| <= l, got l={l}, m={m}")
    basis = _real_basis(l, np.array([direction.azimuth_deg]), np.array([direction.elevation_deg]))
    return float(basis[0, sh_index(l, m)])


def design_matrix(grid: SphericalGrid, order: int) -> np.ndarray:
    """[n_directions x (L+1)^2] matrix of basis values"""
    if order < 0:
        raise InvalidArgumentError(f"SH order must be non-negative, got {order}")
    return _real_basis(order, grid.azimuth_deg, grid.elevation_deg)


def _ridge_solve(A: np.ndarray, B: np.ndarray, ridge_lambda: float, n_bins: int) -> np.ndarray:
    n_rows, n_cols = A.shape
    if ridge_lambda == 0.0:
        singular_values = np.linalg.svd(A, compute_uv=False)
        rank_deficient = n_rows < n_cols or singular_values[-1] <= singular_values[0] * RANK_TOLERANCE
        if rank_deficient:
            # A is shared by every bin, so all of them fail; name the first in column order
            raise IllConditionedFitError(
                f"Unregularized SH fit is rank deficient ({n_rows} directions, {n_cols} coefficients) "
                f"for every bin of both ears, first at ear {Ear.LEFT.name.lower()}, bin index 0 of {n_bins}",
                bin_index=0,
                ear=Ear.LEFT.name.lower(),
            )

    gram = A.T @ A + ridge_lambda * np.eye(n_cols)
    rhs = A.T @ B
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    except np.linalg.LinAlgError:
        logger.debug("Normal equations not positive definite, falling back to SVD")
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        filt = s / (s * s + ridge_lambda)
        return Vt.T @ (filt[:, None] * (U.T @ B))


def fit_sh_db(values_db: np.ndarray, grid: SphericalGrid, cfg: SHFitConfig,
              sample_rate_hz: float = 48000.0) -> SHCoefficients:
    """Fit SH coefficients to a [n_directions x 2 x W] dB field"""
    values_db = np.asarray(values_db, dtype=np.float64)
    n_dir, _, n_bins = values_db.shape
    if n_dir < 1:
        raise InvalidArgumentError("SH fit needs at least one direction")
    A = design_matrix(grid, cfg.order)
    B = values_db.reshape(n_dir, 2 * n_bins)
    C = _ridge_solve(A, B, cfg.ridge_lambda, n_bins)
    values = C.reshape(A.shape[1], 2, n_bins).transpose(1, 2, 0)
    return SHCoefficients(order_max=cfg.order, values=values, sample_rate_hz=sample_rate_hz)


def fit_sh(meas: Union[SparseMeasurement, HRTFSet], cfg: SHFitConfig) -> SHCoefficients:
    """Ridge-regularized least-squares SH fit of the dB magnitudes of ``meas``"""
    values_db = 20.0 * np.log10(meas.magnitudes)
    return fit_sh_db(values_db, meas.grid, cfg, meas.sample_rate_hz)


def eval_sh_db(coeffs: SHCoefficients, grid: SphericalGrid) -> np.ndarray:
    """Synthesize the dB field [n_directions x 2 x W] on a grid"""
    Y = design_matrix(grid, coeffs.order_max)
    return np.einsum('ewk,nk->new', coeffs.values, Y)


def eval_sh(coeffs: SHCoefficients, grid: SphericalGrid) -> HRTFSet:
    """Inverse transform onto ``grid``; returns linear magnitudes"""
    field_db = eval_sh_db(coeffs, grid)
    return HRTFSet(grid=grid, sample_rate_hz=coeffs.sample_rate_hz, magnitudes=10.0 ** (field_db / 20.0))

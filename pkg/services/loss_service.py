"""
Training objectives on dB fields.

The tensor functions (``*_term``) take dB Tensors shaped [N, 2, W] and are
differentiable; the set-level functions take HRTFSets and return floats
through the same code path.
"""

import logging
from typing import Dict, Optional, Tuple

import numpy as np

from models.config_models import LossWeights
from models.hrtf_models import HRTFSet, neighbor_average_matrix
from models.report_models import LossBreakdown
from nn.tensor import Tensor, absolute, as_tensor, log10, make_op, matmul, mean, reshape
from utils.exceptions import InvalidArgumentError, UnsupportedTopologyError

logger = logging.getLogger(__name__)

LOSS_COMPONENTS = ('lsd', 'ild', 'ndl', 'mse')


def to_db(magnitudes) -> Tensor:
    """20 * log10 of linear magnitudes"""
    return log10(magnitudes) * 20.0


def _rms_last_axis(x: Tensor) -> Tensor:
    """sqrt(mean(x^2)) over the last axis; the gradient is 0 where the RMS is 0"""
    x = as_tensor(x)
    count = x.shape[-1]
    out = np.sqrt(np.mean(x.data * x.data, axis=-1))

    def grad_fn(g):
        safe = np.where(out > 0.0, out, 1.0)
        scale = np.where(out > 0.0, g / (count * safe), 0.0)
        return (scale[..., None] * x.data,)
    return make_op(out, (x,), grad_fn)


def _check_fields(g_db: Tensor, hr_db: Tensor) -> None:
    if g_db.shape != hr_db.shape or g_db.ndim != 3 or g_db.shape[1] != 2:
        raise InvalidArgumentError(f"loss fields must share a [N, 2, W] shape, got {g_db.shape} and {hr_db.shape}")


def lsd_term(g_db: Tensor, hr_db: Tensor) -> Tensor:
    """Mean over directions and ears of the per-spectrum RMS dB difference"""
    g_db, hr_db = as_tensor(g_db), as_tensor(hr_db)
    _check_fields(g_db, hr_db)
    return mean(_rms_last_axis(hr_db - g_db))


def ild_term(g_db: Tensor, hr_db: Tensor) -> Tensor:
    """Mean absolute difference of left-minus-right dB ratios"""
    g_db, hr_db = as_tensor(g_db), as_tensor(hr_db)
    _check_fields(g_db, hr_db)
    ratio_hr = hr_db[:, 0, :] - hr_db[:, 1, :]
    ratio_g = g_db[:, 0, :] - g_db[:, 1, :]
    return mean(absolute(ratio_hr - ratio_g))


def ndl_term(g_db: Tensor, hr_db: Tensor, neighbor_matrix: np.ndarray) -> Tensor:
    """
    Mean squared difference of local contrasts, where the contrast of a
    direction is its value minus the mean of its grid neighbors.
    """
    g_db, hr_db = as_tensor(g_db), as_tensor(hr_db)
    _check_fields(g_db, hr_db)
    n = g_db.shape[0]
    if neighbor_matrix.shape != (n, n):
        raise InvalidArgumentError(f"neighbor matrix {neighbor_matrix.shape} does not match {n} directions")
    flat_shape = (n, 2 * g_db.shape[2])
    hr_flat = reshape(hr_db, flat_shape)
    g_flat = reshape(g_db, flat_shape)
    diff = (hr_flat - matmul(neighbor_matrix, hr_flat)) - (g_flat - matmul(neighbor_matrix, g_flat))
    return mean(diff * diff)


def mse_term(g_db: Tensor, hr_db: Tensor) -> Tensor:
    g_db, hr_db = as_tensor(g_db), as_tensor(hr_db)
    _check_fields(g_db, hr_db)
    diff = hr_db - g_db
    return mean(diff * diff)


def loss_terms(g_db: Tensor, hr_db: Tensor, neighbor_matrix: Optional[np.ndarray],
               weights: LossWeights) -> Tuple[Tensor, Dict[str, Tensor]]:
    """Weighted total and every computable component as Tensors"""
    if neighbor_matrix is None and weights.w_ndl > 0.0:
        raise UnsupportedTopologyError("the neighbor term needs an equiangular target grid")
    terms: Dict[str, Tensor] = {
        'lsd': lsd_term(g_db, hr_db),
        'ild': ild_term(g_db, hr_db),
        'mse': mse_term(g_db, hr_db),
    }
    if neighbor_matrix is not None:
        terms['ndl'] = ndl_term(g_db, hr_db, neighbor_matrix)

    total: Optional[Tensor] = None
    for name in LOSS_COMPONENTS:
        weight = getattr(weights, f'w_{name}')
        if weight == 0.0 or name not in terms:
            continue
        contribution = terms[name] * weight
        total = contribution if total is None else total + contribution
    if total is None:
        total = Tensor(0.0)
    return total, terms


def breakdown_of(total: Tensor, terms: Dict[str, Tensor]) -> LossBreakdown:
    values = {name: float(terms[name].data) for name in LOSS_COMPONENTS if name in terms}
    return LossBreakdown(total=float(total.data), **values)


def _paired_db(G: HRTFSet, HR: HRTFSet) -> Tuple[Tensor, Tensor]:
    if not G.grid.same_directions(HR.grid):
        raise InvalidArgumentError("generated and reference sets are on different grids")
    if G.n_bins != HR.n_bins:
        raise InvalidArgumentError(f"bin counts differ: {G.n_bins} vs {HR.n_bins}")
    return to_db(G.magnitudes), to_db(HR.magnitudes)


def lsd_loss(G: HRTFSet, HR: HRTFSet) -> float:
    return float(lsd_term(*_paired_db(G, HR)).data)


def ild_loss(G: HRTFSet, HR: HRTFSet) -> float:
    return float(ild_term(*_paired_db(G, HR)).data)


def ndl_loss(G: HRTFSet, HR: HRTFSet) -> float:
    g_db, hr_db = _paired_db(G, HR)
    return float(ndl_term(g_db, hr_db, neighbor_average_matrix(HR.grid)).data)


def mse_loss(G: HRTFSet, HR: HRTFSet) -> float:
    return float(mse_term(*_paired_db(G, HR)).data)


def total_loss(G: HRTFSet, HR: HRTFSet, weights: Optional[LossWeights] = None) -> LossBreakdown:
    """Weighted sum of the loss terms; unit LSD/ILD/NDL weights by default"""
    weights = weights or LossWeights()
    g_db, hr_db = _paired_db(G, HR)
    neighbor_matrix = neighbor_average_matrix(HR.grid) if HR.grid.is_equiangular else None
    total, terms = loss_terms(g_db, hr_db, neighbor_matrix, weights)
    return breakdown_of(total, terms)

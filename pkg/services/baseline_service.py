"""
Algorithmic upsampling baselines: spherical barycentric interpolation and
order-limited SH interpolation. Both interpolate dB magnitudes.
"""

import logging
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from models.config_models import SHFitConfig
from models.hrtf_models import HRTFSet, SparseMeasurement, SphericalGrid, great_circle_distances
from services.sht_service import eval_sh, fit_sh
from utils.exceptions import InsufficientDataError

logger = logging.getLogger(__name__)

# Barycentric weights above -_CONTAINMENT_TOL count as inside a triangle
_CONTAINMENT_TOL = 1e-12
# Chord length under which a target coincides with a measurement (1e-9 degrees)
_COINCIDENT_CHORD = 2.0 * np.sin(np.deg2rad(1e-9) / 2.0)


def _triangles(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Hull faces and their outward unit normals"""
    if points.shape[0] == 3:
        normal = np.cross(points[1] - points[0], points[2] - points[0])
        # a lone triangle faces away from the origin
        if normal @ points[0] < 0.0:
            normal = -normal
        return np.array([[0, 1, 2]]), (normal / np.linalg.norm(normal))[None, :]
    try:
        hull = ConvexHull(points)
    except QhullError:
        logger.warning("Sparse directions do not span a hull; using nearest-neighbor triangles only")
        return np.empty((0, 3), dtype=np.int64), np.empty((0, 3))
    return hull.simplices, hull.equations[:, :3]


def _invert_triangles(points: np.ndarray, triangles: np.ndarray,
                      normals: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Non-degenerate triangles with their inverse vertex matrices, areas and normals"""
    keep, inverses, areas, kept_normals = [], [], [], []
    for tri, normal in zip(triangles, normals):
        vertices = points[tri].T
        if abs(np.linalg.det(vertices)) < 1e-12:
            continue
        a, b, c = points[tri]
        keep.append(tri)
        inverses.append(np.linalg.inv(vertices))
        areas.append(0.5 * np.linalg.norm(np.cross(b - a, c - a)))
        kept_normals.append(normal)
    if not keep:
        return np.empty((0, 3), dtype=np.int64), np.empty((0, 3, 3)), np.empty(0), np.empty((0, 3))
    return np.array(keep), np.array(inverses), np.array(areas), np.array(kept_normals)


def containing_face(coords: np.ndarray, areas: np.ndarray, facing: np.ndarray) -> Optional[int]:
    """
    Index of the face to interpolate from, or None.

    ``coords`` [F, 3] are the target's coordinates over each face's vertices,
    ``facing`` [F] the dot products of the outward normals with the target.
    Among faces whose cone holds the target, only those facing it are kept
    when any do; the smallest of the kept faces wins.
    """
    inside = np.all(coords >= -_CONTAINMENT_TOL, axis=1)
    front = inside & (facing > 0.0)
    candidates = np.flatnonzero(front if front.any() else inside)
    if not candidates.size:
        return None
    return int(candidates[np.argmin(areas[candidates])])


def _nearest_weights(points: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    distances = great_circle_distances(points, target[None, :])[:, 0]
    nearest = np.argsort(distances, kind='stable')[:3]
    vertices = points[nearest].T
    if abs(np.linalg.det(vertices)) < 1e-12:
        return nearest[:1], np.array([1.0])
    raw = np.clip(np.linalg.solve(vertices, target), 0.0, None)
    total = raw.sum()
    if total <= 0.0:
        return nearest[:1], np.array([1.0])
    return nearest, raw / total


def barycentric_weights(sparse_grid: SphericalGrid, target_grid: SphericalGrid) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Per target direction, the source indices and their weights.

    A target inside a spherical triangle of the sparse hull gets the normalized
    coefficients of its decomposition over the triangle vertices. Targets no
    triangle contains fall back to the three nearest sources with clipped,
    renormalized weights.
    """
    if sparse_grid.n_directions < 3:
        raise InsufficientDataError(
            f"barycentric interpolation needs at least 3 directions, got {sparse_grid.n_directions}"
        )
    points = sparse_grid.unit_vectors()
    if np.linalg.matrix_rank(points, tol=1e-9) < 3:
        raise InsufficientDataError("sparse directions all lie on one great circle")

    triangles, inverses, areas, normals = _invert_triangles(points, *_triangles(points))
    targets = target_grid.unit_vectors()
    chords = np.linalg.norm(targets[:, None, :] - points[None, :, :], axis=-1)

    result = []
    for n, target in enumerate(targets):
        exact = np.flatnonzero(chords[n] < _COINCIDENT_CHORD)
        if exact.size:
            result.append((exact[:1], np.array([1.0])))
            continue
        if triangles.shape[0]:
            coords = np.einsum('fij,j->fi', inverses, target)
            best = containing_face(coords, areas, normals @ target)
            if best is not None:
                weights = np.clip(coords[best], 0.0, None)
                result.append((triangles[best], weights / weights.sum()))
                continue
        result.append(_nearest_weights(points, target))
    return result


def barycentric_upsample(sparse: SparseMeasurement, target: SphericalGrid) -> HRTFSet:
    """Interpolate dB magnitudes of ``sparse`` onto ``target``"""
    weights = barycentric_weights(sparse.grid, target)
    source_db = 20.0 * np.log10(sparse.magnitudes)
    out_db = np.empty((target.n_directions,) + source_db.shape[1:], dtype=np.float64)
    for n, (indices, w) in enumerate(weights):
        out_db[n] = np.tensordot(w, source_db[indices], axes=1)
    logger.debug(f"Barycentric upsampling {sparse.n_directions} -> {target.n_directions} directions")
    return HRTFSet(grid=target, sample_rate_hz=sparse.sample_rate_hz, magnitudes=10.0 ** (out_db / 20.0))


def sh_baseline_upsample(sparse: SparseMeasurement, target: SphericalGrid, cfg: SHFitConfig) -> HRTFSet:
    """Order-limited SH interpolation: fit on the sparse set, evaluate on ``target``"""
    return eval_sh(fit_sh(sparse, cfg), target)

from __future__ import annotations

import logging
import math
from typing import Optional

import numpy as np

from .types import PointCloud, ValidationError

log = logging.getLogger(__name__)

FPS_RATIOS = (0.2, 0.3, 0.5, 0.7)


class PlaneFitError(ValueError):
    pass


def bbox_diagonal(points: np.ndarray) -> float:
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def fit_plane_ransac(points: np.ndarray, distance_threshold: float, max_iterations: int = 1000,
                     seed: int = 0):
    """Return ``(normal, offset, inlier_mask)`` of the plane with most inliers."""
    n = points.shape[0]
    if n < 3:
        raise PlaneFitError("plane fit impossible: fewer than 3 points")
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv.size < 2 or sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise PlaneFitError("plane fit impossible: points are collinear or coincident")

    rng = np.random.default_rng(seed)
    scale = max(bbox_diagonal(points), 1e-300)
    best = None
    best_count = -1
    for _ in range(max_iterations):
        i, j, k = rng.choice(n, size=3, replace=False)
        normal = np.cross(points[j] - points[i], points[k] - points[i])
        norm = np.linalg.norm(normal)
        if norm <= 1e-12 * scale * scale:
            continue
        normal = normal / norm
        offset = float(normal @ points[i])
        dist = np.abs(points @ normal - offset)
        inliers = dist <= distance_threshold
        count = int(inliers.sum())
        if count > best_count:
            best, best_count = (normal, offset, inliers), count
    if best is None:
        raise PlaneFitError("plane fit impossible: every sampled triple was degenerate")
    return best


def remove_background_plane(
    pc: PointCloud,
    distance_threshold: Optional[float] = None,
    max_iterations: int = 1000,
    seed: int = 0,
    min_inlier_fraction: float = 0.3,
) -> PointCloud:
    """Drop the dominant RANSAC plane, keeping points farther than the threshold.

    The threshold defaults to 0.5% of the bounding-box diagonal. When the best
    plane holds less than ``min_inlier_fraction`` of the points the cloud is
    returned unchanged with ``meta['plane_removal']['warning']`` set.
    """
    if pc.n < 3:
        raise PlaneFitError("plane fit impossible: fewer than 3 points")
    if distance_threshold is None:
        distance_threshold = 0.005 * bbox_diagonal(pc.points)
    if distance_threshold < 0:
        raise ValidationError("distance_threshold must be >= 0")
    normal, offset, inliers = fit_plane_ransac(pc.points, distance_threshold, max_iterations, seed)
    frac = inliers.mean()
    if frac < min_inlier_fraction:
        log.warning("no dominant plane (inlier fraction %.3f); cloud left unchanged", frac)
        out = pc.subset(np.arange(pc.n))
        out.meta["plane_removal"] = {"removed": 0, "warning": "no dominant plane"}
        return out
    dist = np.abs(pc.points @ normal - offset)
    out = pc.subset(dist > distance_threshold)
    out.meta["plane_removal"] = {
        "removed": int(pc.n - out.n),
        "normal": normal.tolist(),
        "offset": offset,
        "warning": None,
    }
    return out


def farthest_point_indices(points: np.ndarray, m: int, start: int) -> np.ndarray:
    n = points.shape[0]
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    mind = np.sum((points - points[start]) ** 2, axis=1)
    for t in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[t] = nxt
        mind = np.minimum(mind, np.sum((points - points[nxt]) ** 2, axis=1))
    return chosen


def farthest_point_sample(pc: PointCloud, ratio: float, seed: int = 0,
                          start: Optional[int] = None) -> PointCloud:
    """Keep ``ceil(ratio * n)`` points by farthest point sampling.

    The first point is drawn from ``seed`` unless ``start`` pins it.
    """
    if not 0 < ratio <= 1:
        raise ValidationError(f"ratio must be in (0, 1], got {ratio}")
    m = math.ceil(ratio * pc.n - 1e-9)
    if m < 1:
        raise ValidationError("ratio * n must be >= 1")
    if start is None:
        start = int(np.random.default_rng(seed).integers(pc.n))
    return pc.subset(farthest_point_indices(pc.points, m, start))

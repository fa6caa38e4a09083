from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np


class ValidationError(ValueError):
    pass


@dataclass
class PointCloud:
    """Point coordinates with optional per-point labels and an aligned RGB image.

    ``rgb_index`` holds the (row, col) pixel of every point inside ``rgb``.
    """

    points: np.ndarray
    labels: Optional[np.ndarray] = None
    rgb: Optional[np.ndarray] = None
    rgb_index: Optional[np.ndarray] = None
    class_name: str = ""
    sample_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels).astype(np.int64)
        if self.rgb_index is not None:
            self.rgb_index = np.ascontiguousarray(self.rgb_index, dtype=np.int64)
        self.validate()

    @property
    def n(self) -> int:
        return int(self.points.shape[0])

    @property
    def has_anomaly(self) -> bool:
        return self.labels is not None and bool(self.labels.any())

    def validate(self) -> None:
        pts = self.points
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"points must be n x 3, got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValidationError("point cloud is empty")
        if not np.isfinite(pts).all():
            bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
            raise ValidationError(f"non-finite coordinate at point {bad}")
        if self.labels is not None:
            if self.labels.shape != (pts.shape[0],):
                raise ValidationError(
                    f"labels length {self.labels.shape} does not match n={pts.shape[0]}"
                )
            if not np.isin(self.labels, (0, 1)).all():
                raise ValidationError("labels must be in {0, 1}")
        if (self.rgb is None) != (self.rgb_index is None):
            raise ValidationError("rgb and rgb_index must be given together")
        if self.rgb is not None:
            if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
                raise ValidationError(f"rgb must be H x W x 3, got {self.rgb.shape}")
            idx = self.rgb_index
            if idx.shape != (pts.shape[0], 2):
                raise ValidationError("rgb_index must be n x 2")
            H, W = self.rgb.shape[:2]
            if (idx < 0).any() or (idx[:, 0] >= H).any() or (idx[:, 1] >= W).any():
                raise ValidationError("rgb correspondence outside image bounds")

    def subset(self, keep: np.ndarray) -> "PointCloud":
        """Return the cloud restricted to ``keep`` (indices or boolean mask)."""
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        prev = self.meta.get("source_index")
        source = keep if prev is None else prev[keep]
        return replace(
            self,
            points=self.points[keep],
            labels=None if self.labels is None else self.labels[keep],
            rgb_index=None if self.rgb_index is None else self.rgb_index[keep],
            meta={**self.meta, "source_index": source.astype(np.int64)},
        )

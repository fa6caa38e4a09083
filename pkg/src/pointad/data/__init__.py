from .io import (
    DatasetManifest,
    Sample,
    load_manifest,
    load_point_cloud,
    load_rgb,
    save_point_cloud,
    save_rgb,
)
from .ply import PLYParseError, read_ply, write_ply
from .preprocess import (
    FPS_RATIOS,
    PlaneFitError,
    farthest_point_sample,
    fit_plane_ransac,
    remove_background_plane,
)
from .synthetic import ANOMALIES, SHAPES, generate_synthetic_sample
from .types import PointCloud, ValidationError

__all__ = [
    "ANOMALIES", "FPS_RATIOS", "SHAPES",
    "DatasetManifest", "PLYParseError", "PlaneFitError", "PointCloud", "Sample",
    "ValidationError",
    "farthest_point_sample", "fit_plane_ransac", "generate_synthetic_sample",
    "load_manifest", "load_point_cloud", "load_rgb", "read_ply", "remove_background_plane",
    "save_point_cloud", "save_rgb", "write_ply",
]

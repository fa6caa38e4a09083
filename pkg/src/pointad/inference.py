"""Per-point anomaly maps and global scores, 3D-only and RGB-fused (M3D).

``pointad+`` fuses the rendering-layer map S_a with the geometry-layer map
T_a; ``pointad`` uses S_a alone. The global score adds the view-averaged
abnormal probability of the global features to the maximum of the smoothed
point map, half and half.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .config import InferenceConfig, RunConfig
from .data.types import PointCloud
from .encoder import FeatureBundle, TextEmbeddings, similarity_softmax
from .point_repr import (
    Correspondence,
    ExplicitPointRep,
    correspondence,
    explicit_point_seg,
    g_aggregate,
    gaussian_refine,
    knn_neighbors,
    per_view_seg,
    upsample_seg,
)
from .renderer import ViewBundle

MODES = ("pointad+", "pointad")
SCORE_FILE_VERSION = 1


class ScoreError(ValueError):
    pass


def median_nn_distance(points: np.ndarray) -> float:
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def smoothing_graph(points: np.ndarray, k: int = 10) -> np.ndarray:
    """Each point with its k - 1 nearest neighbors, itself first (n x k)."""
    n = points.shape[0]
    k = min(k, n)
    own = np.arange(n)[:, None]
    if k <= 1:
        return own
    return np.concatenate([own, knn_neighbors(points, k - 1)], axis=1)


def smooth_point_map(values, points: np.ndarray, sigma_s: Optional[float] = None, k: int = 10,
                     sigma_scale: float = 1.0, graph: Optional[np.ndarray] = None) -> np.ndarray:
    """Gaussian filter of a scalar point map over the kNN graph (self included).

    ``sigma_s`` defaults to ``sigma_scale`` times the median nearest-neighbor
    distance. Output is a convex combination of inputs, so [0, 1] is preserved.
    """
    points = np.asarray(points, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if sigma_s is None:
        sigma_s = sigma_scale * median_nn_distance(points)
    if sigma_s <= 0:
        raise ScoreError("sigma_s must be > 0")
    nbr = smoothing_graph(points, k) if graph is None else graph
    out, _ = gaussian_refine(values[:, None], points, nbr, sigma_s)
    return out[:, 0]


def combine(s_abn, t_abn, view_abn, mode: str = "pointad+"):
    """Raw (unsmoothed) point map and the view-averaged global probability."""
    if mode not in MODES:
        raise ScoreError(f"unknown mode {mode!r}")
    s_abn = np.asarray(s_abn, dtype=np.float64)
    if mode == "pointad":
        return s_abn, float(np.mean(view_abn))
    if t_abn is None:
        raise ScoreError("pointad+ mode needs the geometry-layer map")
    raw = 0.5 * s_abn + 0.5 * np.asarray(t_abn, dtype=np.float64)
    return raw, float(np.mean(view_abn))


def global_score(view_mean: float, point_map: np.ndarray) -> float:
    return 0.5 * view_mean + 0.5 * float(np.max(point_map))


@dataclass
class ScoreResult:
    point_map: np.ndarray           # n, smoothed (A^m or B^m)
    global_score: float             # A^s or B^s
    per_view_maps: np.ndarray       # K x H x W abnormal probability
    raw_map: np.ndarray             # n, before smoothing
    s_map: np.ndarray               # n, rendering layer
    t_map: Optional[np.ndarray]     # n, geometry layer (pointad+ only)
    view_abnormal: np.ndarray       # K
    mode: str = "pointad+"
    sample_id: str = ""
    rgb_map: Optional[np.ndarray] = None
    rgb_score: Optional[float] = None
    fused_map: Optional[np.ndarray] = None
    fused_score: Optional[float] = None
    meta: dict = field(default_factory=dict)

    @property
    def has_rgb(self) -> bool:
        return self.fused_map is not None

    def check_range(self) -> None:
        for name in ("point_map", "global_score", "rgb_map", "rgb_score", "fused_map", "fused_score"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v)
            if v.size and (v.min() < 0.0 or v.max() > 1.0 or not np.isfinite(v).all()):
                raise ScoreError(f"{name} leaves [0, 1]")


def _check_text(text: TextEmbeddings, features: FeatureBundle) -> None:
    if text.backbone_id != features.backbone_id:
        raise ScoreError(
            f"prompt embeddings from backbone {text.backbone_id!r} but features from {features.backbone_id!r}"
        )


def score_3d(pc: PointCloud, bundle: ViewBundle, features: FeatureBundle, text: TextEmbeddings,
             mode: str = "pointad+", cfg: Optional[RunConfig] = None,
             corr: Optional[Correspondence] = None, explicit: Optional[ExplicitPointRep] = None) -> ScoreResult:
    cfg = cfg or RunConfig()
    _check_text(text, features)
    agg, inf = cfg.aggregation, cfg.inference
    tau = text.temperature
    if corr is None:
        corr = correspondence(bundle, pc.points, agg.k)
    seg2d = per_view_seg(text.rendering, features, tau, bundle.size)
    s_abn = corr.gather_maps(seg2d[..., 1])
    t_abn = None
    if mode == "pointad+":
        if explicit is None:
            explicit = g_aggregate(features, bundle, pc.points, agg.k, agg.alpha, agg.sigma, corr=corr)
        t_abn = explicit_point_seg(explicit.q_hat, text.geometry, tau)[:, 1]
    view_abn = similarity_softmax(text.rendering, np.asarray(features.global_feats, np.float64), tau)[:, 1]
    raw, view_mean = combine(s_abn, t_abn, view_abn, mode)
    graph = smoothing_graph(pc.points, inf.smooth_k)
    sigma_s = inf.smooth_sigma_scale * median_nn_distance(pc.points)
    pmap = smooth_point_map(raw, pc.points, sigma_s, graph=graph)
    res = ScoreResult(pmap, global_score(view_mean, pmap), seg2d[..., 1].astype(np.float32), raw,
                      s_abn, t_abn, view_abn, mode, pc.sample_id,
                      meta={"sigma_s": sigma_s, "smooth_k": inf.smooth_k, "backbone_id": text.backbone_id})
    res.check_range()
    return res


def check_rgb(rgb: Optional[np.ndarray], rgb_index: Optional[np.ndarray], n: int) -> None:
    if rgb is None or rgb_index is None:
        raise ScoreError("M3D scoring needs an RGB image and a point-to-pixel index")
    rgb_index = np.asarray(rgb_index)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ScoreError(f"rgb must be H x W x 3, got {rgb.shape}")
    if rgb_index.shape != (n, 2):
        raise ScoreError(f"rgb_index must be {n} x 2, got {rgb_index.shape}")
    H, W = rgb.shape[:2]
    if (rgb_index < 0).any() or (rgb_index[:, 0] >= H).any() or (rgb_index[:, 1] >= W).any():
        raise ScoreError("rgb_index points outside the RGB image (misaligned)")


def fuse_m3d(raw_map: np.ndarray, rgb_point_map: np.ndarray, rgb_global: float, core_score: float,
             points: np.ndarray, sigma_s: float, graph: np.ndarray):
    """Returns (fused_map, fused_score) from the raw 3D map and the smoothed RGB map."""
    fused = smooth_point_map(0.5 * raw_map + 0.5 * rgb_point_map, points, sigma_s, graph=graph)
    score = 0.5 * (0.5 * rgb_global + 0.5 * core_score) + 0.5 * float(fused.max())
    return fused, score


def score_m3d(pc: PointCloud, bundle: ViewBundle, features: FeatureBundle, text: TextEmbeddings, backbone,
              mode: str = "pointad+", cfg: Optional[RunConfig] = None,
              corr: Optional[Correspondence] = None, explicit: Optional[ExplicitPointRep] = None) -> ScoreResult:
    """3D scoring plus the pixel-aligned RGB branch, fused without retraining."""
    cfg = cfg or RunConfig()
    check_rgb(pc.rgb, pc.rgb_index, pc.n)
    res = score_3d(pc, bundle, features, text, mode, cfg, corr, explicit)
    if backbone.backbone_id != text.backbone_id:
        raise ScoreError("backbone does not match the prompt embeddings")
    rgb = np.asarray(pc.rgb, dtype=np.float64)
    if np.asarray(pc.rgb).dtype == np.uint8:
        rgb = rgb / 255.0
    H, W = rgb.shape[:2]
    size = tuple(cfg.encoder.input_size)
    enc_in = rgb if (H, W) == size else resize_image(rgb, size)
    g_feat, local = backbone.encode_image(enc_in)
    tau = text.temperature
    seg = upsample_seg(similarity_softmax(text.rendering, local, tau), (H, W))[..., 1]
    idx = np.asarray(pc.rgb_index)
    rgb_vals = seg[idx[:, 0], idx[:, 1]]
    graph = smoothing_graph(pc.points, cfg.inference.smooth_k)
    sigma_s = res.meta["sigma_s"]
    res.rgb_map = smooth_point_map(rgb_vals, pc.points, sigma_s, graph=graph)
    res.rgb_score = float(similarity_softmax(text.rendering, np.asarray(g_feat, np.float64)[None], tau)[0, 1])
    res.fused_map, res.fused_score = fuse_m3d(res.raw_map, res.rgb_map, res.rgb_score, res.global_score,
                                              pc.points, sigma_s, graph)
    res.check_range()
    return res


def score_cloud(pc: PointCloud, backbone, text: TextEmbeddings, cfg: Optional[RunConfig] = None,
                mode: str = "pointad+", modality: str = "3d", cache_dir=None) -> ScoreResult:
    """Render, encode (cached), aggregate and score one cloud."""
    from .pipeline import cache_dirs
    from .encoder import cache_features
    from .renderer import render_bundle

    cfg = cfg or RunConfig()
    if modality not in ("3d", "m3d"):
        raise ScoreError(f"unknown modality {modality!r}")
    if modality == "m3d":
        check_rgb(pc.rgb, pc.rgb_index, pc.n)
    render_dir, feat_dir = cache_dirs(cfg, cache_dir)
    bundle = render_bundle(pc, cfg.views, cfg.render, cache_dir=render_dir)
    features = cache_features(bundle, backbone, cache_dir=feat_dir)
    if modality == "m3d":
        return score_m3d(pc, bundle, features, text, backbone, mode, cfg)
    return score_3d(pc, bundle, features, text, mode, cfg)


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    u8 = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    out = Image.fromarray(u8).resize((size[1], size[0]), Image.BILINEAR)
    return np.asarray(out, dtype=np.float64) / 255.0


# -- score files -------------------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_scores(out_dir, res: ScoreResult, extra: Optional[dict] = None) -> list[Path]:
    """``<id>.scores.bin`` (float32 LE point map) plus ``<id>.json`` metadata."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sid = res.sample_id or "sample"
    paths = [out_dir / f"{sid}.scores.bin", out_dir / f"{sid}.json"]
    _atomic_write(paths[0], np.ascontiguousarray(res.point_map, dtype="<f4").tobytes())
    meta = {"version": SCORE_FILE_VERSION, "sample_id": sid, "n": int(res.point_map.size),
            "mode": res.mode, "global_score": res.global_score, "view_abnormal": res.view_abnormal.tolist(),
            "dtype": "<f4", **res.meta}
    if res.has_rgb:
        paths.append(out_dir / f"{sid}.fused.bin")
        _atomic_write(paths[-1], np.ascontiguousarray(res.fused_map, dtype="<f4").tobytes())
        meta.update(rgb_score=res.rgb_score, fused_score=res.fused_score)
    meta.update(extra or {})
    _atomic_write(paths[1], json.dumps(meta, indent=2, sort_keys=True).encode())
    return paths


def read_scores(out_dir, sample_id: str):
    """(point map, metadata); the fused map replaces nothing and is under meta['fused_map']."""
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / f"{sample_id}.json").read_text())
    pm = np.frombuffer((out_dir / f"{sample_id}.scores.bin").read_bytes(), dtype="<f4").astype(np.float64)
    if pm.size != meta["n"]:
        raise ScoreError(f"score file for {sample_id} holds {pm.size} values, expected {meta['n']}")
    fused = out_dir / f"{sample_id}.fused.bin"
    if fused.exists():
        meta["fused_map"] = np.frombuffer(fused.read_bytes(), dtype="<f4").astype(np.float64)
    return pm, meta


def heatmap(values: np.ndarray, underlay: Optional[np.ndarray] = None) -> np.ndarray:
    """Blue-to-red color ramp of a [0, 1] map, blended over a gray underlay."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([v, 1.0 - np.abs(2 * v - 1), 1.0 - v], axis=-1)
    if underlay is not None:
        gray = np.asarray(underlay, dtype=np.float64).mean(axis=-1, keepdims=True)
        rgb = 0.6 * rgb + 0.4 * gray
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)


def write_heatmaps(out_dir, res: ScoreResult, bundle: Optional[ViewBundle] = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, m in enumerate(res.per_view_maps):
        under = bundle.renderings[k].image if bundle is not None else None
        p = out_dir / f"{res.sample_id or 'sample'}_view{k}.png"
        Image.fromarray(heatmap(m, under)).save(p)
        paths.append(p)
    return paths


__all__ = [
    "InferenceConfig", "MODES", "ScoreError", "ScoreResult", "combine", "fuse_m3d", "global_score",
    "heatmap", "median_nn_distance", "read_scores", "score_3d", "score_cloud", "score_m3d", "smooth_point_map",
    "smoothing_graph", "write_heatmaps", "write_scores",
]

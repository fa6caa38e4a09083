"""Orthographic multi-view point splatting with z-buffered correspondence.

Each view rotates the cloud about the X axis and fits it into an H x W frame.
Two z-buffers are kept: the *center* buffer (one pixel per point) defines
depth, visibility and the ground-truth mask; the *splat* buffer paints a disc
of ``splat_radius`` pixels per point and defines the shaded image and the
dense label image used as the 2D training target.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .data.types import PointCloud

log = logging.getLogger(__name__)

CACHE_VERSION = 1
OFF_FRAME = -1

LIGHTING_PRESETS = {"--": 0.25, "-": 0.5, "original": 1.0, "+": 2.0, "++": 4.0}


class RenderError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    size: tuple[int, int] = (336, 336)
    splat_radius: int = 1
    lighting: str = "original"
    light_dir: tuple[float, float, float] = (-0.3, 0.4, 1.0)
    ambient: float = 0.12
    albedo: float = 0.85
    margin: float = 0.05
    normal_k: int = 16
    angles: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.splat_radius < 0:
            raise ConfigError("splat_radius must be >= 0")
        if self.lighting not in LIGHTING_PRESETS:
            raise ConfigError(f"unknown lighting preset {self.lighting!r}")
        if self.angles is not None:
            object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))

    @property
    def intensity(self) -> float:
        return LIGHTING_PRESETS[self.lighting]

    def to_json(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        d["light_dir"] = list(self.light_dir)
        d["angles"] = None if self.angles is None else list(self.angles)
        return d


def view_angles(K: int, overrides: Optional[Sequence[float]] = None) -> list[float]:
    """Rotation angles about X: ``K`` evenly spaced values, step pi/5 for K=9."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    if overrides is not None:
        overrides = [float(a) for a in overrides]
        if len(overrides) != K:
            raise ConfigError(f"angle override has {len(overrides)} entries, expected {K}")
        return overrides
    half = (K - 1) / 2
    return [(k - half) * np.pi / (half + 1) for k in range(K)]


def rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


@dataclass(frozen=True)
class ViewTransform:
    """Rotation about X followed by a uniform orthographic fit into the frame.

    Continuous pixel coordinates are ``row = scale * (-y') + row_offset`` and
    ``col = scale * x' + col_offset``; depth is ``-z'`` so nearer is smaller.
    """

    angle: float
    scale: float
    row_offset: float
    col_offset: float
    H: int
    W: int
    view_index: int = 0

    @classmethod
    def fit(cls, points: np.ndarray, angle: float, H: int, W: int, margin: float = 0.05,
            view_index: int = 0) -> "ViewTransform":
        rot = points @ rotation_x(angle).T
        xy = np.stack([rot[:, 0], -rot[:, 1]], axis=1)
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        extent = float(np.max(hi - lo))
        scale = (1 - 2 * margin) * min(H, W) / extent if extent > 0 else 1.0
        center = (lo + hi) / 2
        return cls(float(angle), float(scale), H / 2 - scale * center[1], W / 2 - scale * center[0],
                   int(H), int(W), int(view_index))

    def project(self, points: np.ndarray):
        """Return continuous (row, col) coordinates and depth for each point."""
        rot = points @ rotation_x(self.angle).T
        rows = self.scale * (-rot[:, 1]) + self.row_offset
        cols = self.scale * rot[:, 0] + self.col_offset
        return np.stack([rows, cols], axis=1), -rot[:, 2]

    def unproject(self, rc: np.ndarray, depth: np.ndarray) -> np.ndarray:
        x = (rc[:, 1] - self.col_offset) / self.scale
        y = -(rc[:, 0] - self.row_offset) / self.scale
        rot = np.stack([x, y, -depth], axis=1)
        return rot @ rotation_x(self.angle)

    def to_feature(self, points: np.ndarray, h: int, w: int) -> np.ndarray:
        """Continuous coordinates in an h x w feature grid (the pixel map scaled by h/H)."""
        rc, _ = self.project(points)
        return rc * np.array([h / self.H, w / self.W])


@dataclass
class Rendering:
    image: np.ndarray         # H x W x 3 float32, multiples of 1/255
    depth: np.ndarray         # H x W float32, +inf where no point center lands
    gt_mask: np.ndarray       # H x W uint8, label of the visible point per center pixel
    point_to_pixel: np.ndarray  # n x 2 int64 (row, col), -1 when off-frame
    visibility: np.ndarray    # n uint8
    label_image: np.ndarray   # H x W uint8, splat-buffer labels (dense 2D target)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class ViewBundle:
    renderings: list[Rendering]
    transforms: list[ViewTransform]
    config: RenderConfig
    key: str = ""
    from_cache: bool = False

    @property
    def K(self) -> int:
        return len(self.renderings)

    @property
    def size(self) -> tuple[int, int]:
        return self.renderings[0].shape

    def point_to_pixel(self) -> np.ndarray:
        return np.stack([r.point_to_pixel for r in self.renderings])

    def visibility(self) -> np.ndarray:
        return np.stack([r.visibility for r in self.renderings])

    def label_images(self) -> np.ndarray:
        return np.stack([r.label_image for r in self.renderings])

    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.renderings])


def compute_visibility(point_to_pixel: np.ndarray, depths: np.ndarray, frame: tuple[int, int]) -> np.ndarray:
    """1 for the minimum-depth point of every occupied pixel (lowest index on ties)."""
    H, W = frame
    pix = np.asarray(point_to_pixel)
    n = pix.shape[0]
    vis = np.zeros(n, dtype=np.uint8)
    inside = (pix[:, 0] >= 0) & (pix[:, 0] < H) & (pix[:, 1] >= 0) & (pix[:, 1] < W)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return vis
    flat = pix[idx, 0] * W + pix[idx, 1]
    order = np.lexsort((idx, np.asarray(depths)[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    vis[idx[order[first]]] = 1
    return vis


def estimate_normals(points: np.ndarray, k: int = 16) -> np.ndarray:
    """Unoriented unit normals from PCA of each point's k-neighborhood."""
    n = points.shape[0]
    if n < 3:
        return np.tile([0.0, 0.0, 1.0], (n, 1))
    k = min(k, n - 1)
    _, nbr = cKDTree(points).query(points, k=k + 1)
    local = points[nbr] - points[nbr].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def _disc_offsets(r: int) -> np.ndarray:
    d = np.arange(-r, r + 1)
    dr, dc = np.meshgrid(d, d, indexing="ij")
    keep = dr**2 + dc**2 <= r * r
    return np.stack([dr[keep], dc[keep]], axis=1)


def _quantize(img: np.ndarray) -> np.ndarray:
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return q.astype(np.float32) / np.float32(255.0)


def render_view(pc: PointCloud, t: ViewTransform, cfg: RenderConfig,
                normals: Optional[np.ndarray] = None) -> Rendering:
    H, W = t.H, t.W
    rc, depth = t.project(pc.points)
    pix = np.floor(rc).astype(np.int64)
    inside = (pix[:, 0] >= 0) & (pix[:, 0] < H) & (pix[:, 1] >= 0) & (pix[:, 1] < W)
    if not inside.any():
        raise RenderError("degenerate projection: every point falls outside the frame")
    pix[~inside] = OFF_FRAME
    vis = compute_visibility(pix, depth, (H, W))
    labels = pc.labels if pc.labels is not None else np.zeros(pc.n, dtype=np.int64)

    depth_buf = np.full((H, W), np.inf, dtype=np.float32)
    gt = np.zeros((H, W), dtype=np.uint8)
    v = np.flatnonzero(vis)
    depth_buf[pix[v, 0], pix[v, 1]] = depth[v]
    gt[pix[v, 0], pix[v, 1]] = labels[v]

    if normals is None:
        normals = estimate_normals(pc.points, cfg.normal_k)
    cam_n = normals @ rotation_x(t.angle).T
    cam_n = cam_n * np.where(cam_n[:, 2:3] < 0, -1.0, 1.0)
    light = np.asarray(cfg.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shade = cfg.ambient + cfg.intensity * cfg.albedo * np.clip(cam_n @ light, 0.0, None)

    # splat buffer: each in-frame point paints a disc; the nearest wins per pixel
    src = np.flatnonzero(inside)
    offs = _disc_offsets(cfg.splat_radius)
    rr = (pix[src, 0][None, :] + offs[:, 0:1]).ravel()
    cc = (pix[src, 1][None, :] + offs[:, 1:2]).ravel()
    who = np.tile(src, offs.shape[0])
    ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
    rr, cc, who = rr[ok], cc[ok], who[ok]
    flat = rr * W + cc
    order = np.lexsort((who, depth[who], flat))
    fs = flat[order]
    first = np.ones(fs.size, dtype=bool)
    first[1:] = fs[1:] != fs[:-1]
    win_pix, win_pt = fs[first], who[order[first]]

    image = np.zeros(H * W, dtype=np.float64)
    image[win_pix] = shade[win_pt]
    image = np.repeat(image.reshape(H, W, 1), 3, axis=2)
    label_image = np.zeros(H * W, dtype=np.uint8)
    label_image[win_pix] = labels[win_pt]

    return Rendering(
        image=_quantize(image),
        depth=depth_buf,
        gt_mask=gt,
        point_to_pixel=pix,
        visibility=vis,
        label_image=label_image.reshape(H, W),
    )


def bundle_key(pc: PointCloud, K: int, cfg: RenderConfig) -> str:
    h = hashlib.sha256()
    h.update(f"v{CACHE_VERSION}:K{K}:".encode())
    h.update(np.ascontiguousarray(pc.points, dtype="<f8").tobytes())
    if pc.labels is not None:
        h.update(b"labels")
        h.update(np.ascontiguousarray(pc.labels, dtype="<i8").tobytes())
    h.update(json.dumps(cfg.to_json(), sort_keys=True).encode())
    return h.hexdigest()[:32]


def _write_view(d: Path, k: int, r: Rendering, t: ViewTransform, cfg: RenderConfig, key: str):
    q = np.rint(r.image * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(d / f"view_{k}.png")
    (d / f"view_{k}.depth.bin").write_bytes(r.depth.astype("<f4").tobytes())
    np.savez(d / f"view_{k}.corr.npz", point_to_pixel=r.point_to_pixel, visibility=r.visibility,
             gt_mask=r.gt_mask, label_image=r.label_image)
    meta = {"version": CACHE_VERSION, "hash": key, "view_index": k, "angle": t.angle,
            "transform": asdict(t), "config": cfg.to_json(), "H": t.H, "W": t.W}
    (d / f"view_{k}.meta").write_text(json.dumps(meta, indent=1))


def _read_view(d: Path, k: int, key: str):
    meta = json.loads((d / f"view_{k}.meta").read_text())
    if meta["version"] != CACHE_VERSION or meta["hash"] != key:
        raise ValueError("cache metadata mismatch")
    H, W = meta["H"], meta["W"]
    img = np.asarray(Image.open(d / f"view_{k}.png").convert("RGB"))
    depth = np.frombuffer((d / f"view_{k}.depth.bin").read_bytes(), dtype="<f4")
    depth = depth.reshape(H, W).astype(np.float32)
    with np.load(d / f"view_{k}.corr.npz") as z:
        corr = {name: z[name] for name in z.files}
    r = Rendering(image=img.astype(np.float32) / np.float32(255.0), depth=depth, **corr)
    return r, ViewTransform(**meta["transform"])


def _load_bundle(d: Path, K: int, cfg: RenderConfig, key: str) -> ViewBundle:
    renders, transforms = [], []
    for k in range(K):
        r, t = _read_view(d, k, key)
        renders.append(r)
        transforms.append(t)
    return ViewBundle(renders, transforms, cfg, key=key, from_cache=True)


def render_bundle(pc: PointCloud, K: int = 9, cfg: RenderConfig = RenderConfig(),
                  cache_dir=None) -> ViewBundle:
    """Render all views; with ``cache_dir`` results are stored under the content hash."""
    angles = view_angles(K, cfg.angles)
    key = bundle_key(pc, K, cfg)
    target = None
    if cache_dir is not None:
        target = Path(cache_dir) / key
        if target.exists():
            try:
                return _load_bundle(target, K, cfg, key)
            except Exception as exc:  # corrupted entry: rebuild it
                warnings.warn(f"render cache entry {target} unreadable ({exc}); re-rendering")
                shutil.rmtree(target, ignore_errors=True)

    H, W = cfg.size
    normals = estimate_normals(pc.points, cfg.normal_k)
    transforms = [ViewTransform.fit(pc.points, a, H, W, cfg.margin, view_index=k)
                  for k, a in enumerate(angles)]
    renders = [render_view(pc, t, cfg, normals) for t in transforms]
    bundle = ViewBundle(renders, transforms, cfg, key=key)

    if target is not None:
        tmp = target.parent / f".tmp-{key}-{os.getpid()}"
        shutil.rmtree(tmp, ignore_errors=True)
        tmp.mkdir(parents=True)
        for k, (r, t) in enumerate(zip(renders, transforms)):
            _write_view(tmp, k, r, t, cfg, key)
        try:
            os.rename(tmp, target)
        except OSError:  # another writer won the race
            shutil.rmtree(tmp, ignore_errors=True)
    return bundle


def with_lighting(cfg: RenderConfig, preset: str) -> RenderConfig:
    return replace(cfg, lighting=preset)

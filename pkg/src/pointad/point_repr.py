"""Point-level representations built from per-view 2D features.

Rendering layer: per-view segmentation maps are bilinearly upsampled to the
rendering size and read back at each visible point's pixel, then averaged over
the views in which the point is visible.

Geometry layer (G-aggregation): per-point features are the mean over visible
views of the bilinearly sampled local features, refined by a normalized
Gaussian kernel over the k nearest neighbors and fused with weight alpha.

Bilinear convention (shared by both layers): output pixel ``u`` of ``H`` reads
the ``h``-cell grid at ``(u + 0.5) * h / H - 0.5``, clamped to ``[0, h - 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from ._tensor import any_tensor, out_like, to_tensor
from .encoder import FeatureBundle, similarity_softmax
from .renderer import ViewBundle

DEFAULT_K = 10
DEFAULT_ALPHA = 0.5
DEFAULT_SIGMA = 1.0


class CoverageError(ValueError):
    pass


def bilinear_taps(u: np.ndarray, h: int, H: int):
    """Lower/upper source cells and weights for output pixels ``u``."""
    src = (np.asarray(u, dtype=np.float64) + 0.5) * (h / H) - 0.5
    src = np.clip(src, 0.0, h - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, h - 1)
    frac = src - i0
    return i0, i1, 1.0 - frac, frac


def bilinear_matrix(h: int, H: int) -> np.ndarray:
    """H x h interpolation matrix; ``A_h @ grid @ A_w.T`` upsamples a grid."""
    i0, i1, w0, w1 = bilinear_taps(np.arange(H), h, H)
    A = np.zeros((H, h))
    np.add.at(A, (np.arange(H), i0), w0)
    np.add.at(A, (np.arange(H), i1), w1)
    return A


def upsample_seg(seg, size: tuple[int, int]):
    """Bilinear upsampling of an h x w (x C) grid, or a stack K x h x w x C, to H x W."""
    H, W = size
    as_t = any_tensor(seg)
    s = to_tensor(seg)
    squeeze = s.ndim == 2
    if squeeze:
        s = s[..., None]
    h, w = s.shape[-3], s.shape[-2]
    if h > H or w > W:
        raise ValueError(f"cannot upsample {h}x{w} to smaller {H}x{W}")
    Ah = torch.as_tensor(bilinear_matrix(h, H), dtype=s.dtype)
    Aw = torch.as_tensor(bilinear_matrix(w, W), dtype=s.dtype)
    out = torch.einsum("uh,...hwc,vw->...uvc", Ah, s, Aw)
    if squeeze:
        out = out[..., 0]
    return out_like(out, as_t)


@dataclass
class Correspondence:
    """Visible (view, point) pairs of a bundle plus the zero-coverage fallback."""

    view: np.ndarray        # m
    point: np.ndarray       # m
    row: np.ndarray         # m
    col: np.ndarray         # m
    coverage: np.ndarray    # n, number of views in which each point is visible
    fill_index: np.ndarray  # u x k covered points whose mean fills each uncovered point
    uncovered: np.ndarray   # u
    size: tuple[int, int]
    K: int

    @property
    def n(self) -> int:
        return int(self.coverage.shape[0])

    def _finish(self, per_pair, C_shape, as_t, like):
        """Average pair values per point and fill uncovered points."""
        n = self.n
        pt = torch.as_tensor(self.point)
        acc = torch.zeros((n, *C_shape), dtype=like.dtype).index_add(0, pt, per_pair)
        cov = torch.as_tensor(self.coverage, dtype=like.dtype).clamp(min=1)
        out = acc / cov.reshape(-1, *([1] * len(C_shape)))
        if self.uncovered.size:
            fill = out[torch.as_tensor(self.fill_index)].mean(dim=1)
            out = out.index_copy(0, torch.as_tensor(self.uncovered), fill)
        return out_like(out, as_t)

    def gather_maps(self, maps):
        """K x H x W (x C) maps -> per-point mean over visible views."""
        as_t = any_tensor(maps)
        m = to_tensor(maps)
        per_pair = m[torch.as_tensor(self.view), torch.as_tensor(self.row), torch.as_tensor(self.col)]
        return self._finish(per_pair, tuple(m.shape[3:]), as_t, m)

    def sample_grids(self, grids):
        """K x h x w x d grids sampled bilinearly at each visible pixel -> n x d mean."""
        as_t = any_tensor(grids)
        g = to_tensor(grids)
        K, h, w = g.shape[:3]
        H, W = self.size
        r0, r1, a0, a1 = bilinear_taps(self.row, h, H)
        c0, c1, b0, b1 = bilinear_taps(self.col, w, W)
        v = torch.as_tensor(self.view)
        tw = lambda x: torch.as_tensor(x, dtype=g.dtype)[:, None]
        per_pair = (
            tw(a0 * b0) * g[v, torch.as_tensor(r0), torch.as_tensor(c0)]
            + tw(a0 * b1) * g[v, torch.as_tensor(r0), torch.as_tensor(c1)]
            + tw(a1 * b0) * g[v, torch.as_tensor(r1), torch.as_tensor(c0)]
            + tw(a1 * b1) * g[v, torch.as_tensor(r1), torch.as_tensor(c1)]
        )
        return self._finish(per_pair, (g.shape[3],), as_t, g)


def correspondence(bundle: ViewBundle, points: np.ndarray, k: int = DEFAULT_K) -> Correspondence:
    vis = bundle.visibility().astype(bool)
    p2p = bundle.point_to_pixel()
    view, point = np.nonzero(vis)
    coverage = vis.sum(axis=0)
    covered = np.flatnonzero(coverage > 0)
    if covered.size == 0:
        raise CoverageError("no visible points in any view")
    uncovered = np.flatnonzero(coverage == 0)
    kk = min(k, covered.size)
    if uncovered.size:
        _, nn = cKDTree(points[covered]).query(points[uncovered], k=kk)
        fill = covered[np.asarray(nn).reshape(uncovered.size, kk)]
    else:
        fill = np.zeros((0, kk), dtype=np.int64)
    return Correspondence(view, point, p2p[view, point, 0], p2p[view, point, 1], coverage,
                          fill, uncovered, bundle.size, bundle.K)


@dataclass
class ImplicitPointSeg:
    per_point: np.ndarray    # n x 2 (normal, abnormal)
    per_view_2d: np.ndarray  # K x H x W x 2
    coverage: np.ndarray     # n

    @property
    def abnormal(self):
        return self.per_point[:, 1]

    @property
    def normal(self):
        return self.per_point[:, 0]


def per_view_seg(g_pair, features: FeatureBundle, tau: float, size: tuple[int, int]):
    """Upsampled segmentation maps K x H x W x 2 of every view."""
    return upsample_seg(similarity_softmax(g_pair, features.local_maps, tau), size)


def implicit_point_seg(seg2d, bundle: ViewBundle, points: Optional[np.ndarray] = None,
                       corr: Optional[Correspondence] = None, k: int = DEFAULT_K) -> ImplicitPointSeg:
    """Average each point's pixel value over the views where it is visible.

    ``seg2d`` holds the upsampled K x H x W x C maps. Points visible in no view
    take the mean of their ``k`` nearest covered neighbors.
    """
    if corr is None:
        if points is None:
            raise ValueError("points are needed to build the correspondence")
        corr = correspondence(bundle, points, k)
    per_point = corr.gather_maps(seg2d)
    return ImplicitPointSeg(per_point, seg2d, corr.coverage)


def mean_aggregate(features: FeatureBundle, bundle: ViewBundle, points: Optional[np.ndarray] = None,
                   corr: Optional[Correspondence] = None, k: int = DEFAULT_K) -> np.ndarray:
    """Initial point features: mean over visible views of the bilinearly sampled local maps."""
    if corr is None:
        if points is None:
            raise ValueError("points are needed to build the correspondence")
        corr = correspondence(bundle, points, k)
    return corr.sample_grids(np.asarray(features.local_maps, dtype=np.float64))


def knn_neighbors(points: np.ndarray, k: int = DEFAULT_K) -> np.ndarray:
    """Euclidean k nearest neighbors excluding self; equal distances go to the lower index."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of points n={n}")
    q = min(n, k + 9)
    dist, idx = cKDTree(points).query(points, k=q)
    dist = np.array(dist, dtype=np.float64).reshape(n, q)
    idx = np.asarray(idx, dtype=np.int64).reshape(n, q)
    rows = np.arange(n)
    dist[idx == rows[:, None]] = np.inf
    o = np.argsort(idx, axis=1, kind="stable")
    idx, dist = np.take_along_axis(idx, o, 1), np.take_along_axis(dist, o, 1)
    o = np.argsort(dist, axis=1, kind="stable")
    idx, dist = np.take_along_axis(idx, o, 1), np.take_along_axis(dist, o, 1)
    out = idx[:, :k].copy()
    if q < n:
        # rows whose k-th distance ties the farthest queried one may miss lower indices
        last = np.where(np.isinf(dist), -np.inf, dist).max(axis=1)
        for j in np.flatnonzero(dist[:, k - 1] >= last):
            d = np.sqrt(((points - points[j]) ** 2).sum(axis=1))
            d[j] = np.inf
            out[j] = np.lexsort((rows, d))[:k]
    return out


def kernel_weights(points: np.ndarray, neighbors: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian kernel over neighbor distances, normalized per row."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    d2 = ((points[neighbors] - points[:, None, :]) ** 2).sum(axis=-1)
    # shift by the row minimum before exponentiating; normalization cancels it
    logits = -(d2 - d2.min(axis=1, keepdims=True)) / (2 * sigma**2)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def gaussian_refine(q, points: np.ndarray, neighbors: np.ndarray, sigma: float = DEFAULT_SIGMA):
    """Return ``(q_tilde, weights)`` with q_tilde[j] = sum_l w_jl * q[l].

    Evaluated as ``q[j] + sum_l w_jl * (q[l] - q[j])`` (equal because rows sum
    to one) so a constant neighborhood is reproduced bit for bit.
    """
    w = kernel_weights(np.asarray(points, dtype=np.float64), neighbors, sigma)
    if any_tensor(q):
        wt = torch.as_tensor(w, dtype=q.dtype)
        diff = q[torch.as_tensor(neighbors)] - q[:, None]
        return q + (wt[..., None] * diff).sum(dim=1), w
    q = np.asarray(q, dtype=np.float64)
    return q + np.einsum("nk,nkd->nd", w, q[neighbors] - q[:, None]), w


def fuse(q_tilde, q, alpha: float = DEFAULT_ALPHA):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    return alpha * q_tilde + (1 - alpha) * q


@dataclass
class ExplicitPointRep:
    q: np.ndarray
    q_tilde: np.ndarray
    q_hat: np.ndarray
    neighbors: np.ndarray
    weights: np.ndarray


def g_aggregate(features: FeatureBundle, bundle: ViewBundle, points: np.ndarray,
                k: int = DEFAULT_K, alpha: float = DEFAULT_ALPHA, sigma: float = DEFAULT_SIGMA,
                corr: Optional[Correspondence] = None) -> ExplicitPointRep:
    q = mean_aggregate(features, bundle, points, corr=corr, k=k)
    nbr = knn_neighbors(points, k)
    q_tilde, w = gaussian_refine(q, points, nbr, sigma)
    return ExplicitPointRep(q, q_tilde, fuse(q_tilde, q, alpha), nbr, w)


def explicit_point_seg(q_hat, g_geometry, tau: float):
    """n x 2 (normal, abnormal) similarity of geometry prompts to fused point features."""
    return similarity_softmax(g_geometry, q_hat, tau)

"""Bilinear upsampling, rendering-layer point maps and G-aggregation."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pointad.checks import cell_probs, knn_oracle, point_seg_oracle
from pointad.encoder import FeatureBundle
from pointad.point_repr import (
    DEFAULT_ALPHA,
    DEFAULT_K,
    DEFAULT_SIGMA,
    Correspondence,
    explicit_point_seg,
    fuse,
    g_aggregate,
    gaussian_refine,
    implicit_point_seg,
    kernel_weights,
    knn_neighbors,
    mean_aggregate,
    per_view_seg,
    upsample_seg,
)


def test_defaults():
    assert (DEFAULT_K, DEFAULT_ALPHA, DEFAULT_SIGMA) == (10, 0.5, 1.0)


def test_upsample_constant_and_identity():
    np.testing.assert_allclose(upsample_seg(np.full((3, 4), 0.3), (9, 8)), 0.3, atol=1e-15)
    g = np.random.default_rng(0).random((5, 5, 2))
    np.testing.assert_array_equal(upsample_seg(g, (5, 5)), g)


def _bilinear_by_hand(grid, H, W):
    h, w = grid.shape
    out = np.empty((H, W))
    for u in range(H):
        for v in range(W):
            y = min(max((u + 0.5) * h / H - 0.5, 0), h - 1)
            x = min(max((v + 0.5) * w / W - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[u, v] = ((1 - fy) * (1 - fx) * grid[y0, x0] + (1 - fy) * fx * grid[y0, x1]
                         + fy * (1 - fx) * grid[y1, x0] + fy * fx * grid[y1, x1])
    return out


def test_upsample_two_by_two_hand_values():
    grid = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = upsample_seg(grid, (4, 4))
    # pixel 0 -> source -0.25 clamps to 0; pixel 1 -> 0.25; pixel 2 -> 0.75; pixel 3 -> 1.25 clamps to 1
    np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0])
    np.testing.assert_allclose(out[:, 0], [0.0, 0.5, 1.5, 2.0])
    np.testing.assert_allclose(out[1, 1], 0.75 * 0.75 * 0 + 0.75 * 0.25 * 1 + 0.25 * 0.75 * 2 + 0.25 * 0.25 * 3)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), fH=st.integers(1, 4), fW=st.integers(1, 4),
       seed=st.integers(0, 1000))
def test_upsample_matches_hand_loop(h, w, fH, fW, seed):
    grid = np.random.default_rng(seed).random((h, w))
    H, W = h * fH + seed % 3, w * fW
    np.testing.assert_allclose(upsample_seg(grid, (H, W)), _bilinear_by_hand(grid, H, W), atol=1e-12)


def test_upsample_accepts_tensors_and_stacks():
    g = torch.rand(3, 2, 2, 2, dtype=torch.float64)
    out = upsample_seg(g, (6, 6))
    assert isinstance(out, torch.Tensor) and out.shape == (3, 6, 6, 2)
    with pytest.raises(ValueError):
        upsample_seg(np.zeros((8, 8)), (4, 4))


def _corr(view, point, row, col, n, K=2, size=(4, 4)):
    cov = np.bincount(point, minlength=n)
    return Correspondence(np.array(view), np.array(point), np.array(row), np.array(col), cov,
                          np.zeros((0, 1), dtype=np.int64), np.zeros(0, dtype=np.int64), size, K)


def test_point_value_is_mean_over_visible_views():
    maps = np.zeros((2, 4, 4))
    maps[0, 1, 1], maps[1, 2, 3], maps[0, 3, 0] = 0.2, 0.6, 0.9
    c = _corr([0, 1, 0], [0, 0, 1], [1, 2, 3], [1, 3, 0], n=2)
    np.testing.assert_allclose(c.gather_maps(maps), [0.4, 0.9])


def test_mean_aggregate_one_and_two_views():
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=5), rng.normal(size=5)
    grids = np.zeros((2, 4, 4, 5))
    grids[0, :, :] = u
    grids[1, :, :] = v
    one = _corr([0], [0], [2], [1], n=1)
    np.testing.assert_allclose(one.sample_grids(grids), u[None])
    two = _corr([0, 1], [0, 0], [2, 0], [1, 3], n=1)
    np.testing.assert_allclose(two.sample_grids(grids), ((u + v) / 2)[None])


def test_knn_tie_break_and_default():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert knn_neighbors(pts, 1)[1, 0] == 0
    with pytest.raises(ValueError):
        knn_neighbors(pts, 3)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 120), k=st.integers(1, 12), grid=st.booleans())
def test_knn_matches_sort_oracle(seed, n, k, grid):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 3, size=(n, 3)).astype(float) if grid else rng.normal(size=(n, 3))
    k = min(k, n - 1)
    np.testing.assert_array_equal(knn_neighbors(pts, k), knn_oracle(pts, k))


def test_kernel_weight_examples():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 2, 0]])
    np.testing.assert_allclose(kernel_weights(pts, np.array([[1, 2]] * 4), 1.0)[0], [0.5, 0.5])
    w = kernel_weights(pts, np.array([[1, 3]] * 4), 1.0)[0]
    e = np.exp([-0.5, -2.0])
    np.testing.assert_allclose(w, e / e.sum(), atol=1e-12)
    np.testing.assert_allclose(w, [0.8176, 0.1824], atol=5e-5)
    far = np.array([[0.0, 0, 0], [0, 0, 0], [50, 0, 0]])
    np.testing.assert_allclose(kernel_weights(far, np.array([[1, 2]] * 3), 1.0)[0], [1.0, 0.0], atol=1e-300)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(12, 150), sigma=st.floats(0.05, 5.0),
       alpha=st.floats(0.0, 1.0))
def test_g_aggregation_invariants(seed, n, sigma, alpha):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10)
    nb = knn_neighbors(pts, 10)
    q = rng.normal(size=(n, 6))
    qt, w = gaussian_refine(q, pts, nb, sigma)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    assert (w >= 0).all()
    const = np.tile(q[:1], (n, 1))
    ct, _ = gaussian_refine(const, pts, nb, sigma)
    np.testing.assert_allclose(fuse(ct, const, alpha), const, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(fuse(qt, q, 0.0), q)
    np.testing.assert_array_equal(fuse(qt, q, 1.0), qt)


def test_fuse_rejects_alpha():
    with pytest.raises(ValueError):
        fuse(np.zeros(2), np.zeros(2), 1.5)


def test_explicit_seg_examples():
    g = np.eye(3)[:2]
    q = np.array([[0.0, 1.0, 0.0], [0.3, 0.3, 0.3], [0.3, 0.3, 0.3]])
    t = explicit_point_seg(q, g, 0.01)
    assert t[0, 1] > 0.5
    np.testing.assert_allclose(t[1], t[2])
    np.testing.assert_allclose(t.sum(-1), 1.0)
    rng = np.random.default_rng(2)
    q, g = rng.normal(size=(30, 8)), rng.normal(size=(2, 8))
    np.testing.assert_allclose(explicit_point_seg(q, g, 0.02), cell_probs(g, q, 0.02), atol=1e-12)


# -- on rendered samples -----------------------------------------------------

def test_implicit_seg_matches_point_oracle(small_samples):
    s = small_samples[0]
    g = np.random.default_rng(0).normal(size=(2, s.features.d))
    seg2d = per_view_seg(g, s.features, 0.01, s.bundle.size)
    fast = implicit_point_seg(seg2d, s.bundle, s.pc.points).per_point
    ref = point_seg_oracle(g, s.features, s.bundle, s.pc.points, 0.01)
    assert np.abs(fast - ref).max() <= 1e-5


def _gather_oracle(features, bundle, points, k=10):
    """Naive per-point loop: bilinear sample of each visible view, averaged."""
    local = np.asarray(features.local_maps, dtype=np.float64)
    K, h, w, d = local.shape
    n = points.shape[0]
    out, cnt = np.zeros((n, d)), np.zeros(n)
    for v in range(K):
        H, W = bundle.size
        r = bundle.renderings[v]
        for j in np.flatnonzero(r.visibility):
            row, col = r.point_to_pixel[j]
            y = min(max((row + 0.5) * h / H - 0.5, 0), h - 1)
            x = min(max((col + 0.5) * w / W - 0.5, 0), w - 1)
            y0, x0 = int(y), int(x)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[j] += ((1 - fy) * (1 - fx) * local[v, y0, x0] + (1 - fy) * fx * local[v, y0, x1]
                       + fy * (1 - fx) * local[v, y1, x0] + fy * fx * local[v, y1, x1])
            cnt[j] += 1
    out /= np.maximum(cnt, 1)[:, None]
    covered = np.flatnonzero(cnt > 0)
    for j in np.flatnonzero(cnt == 0):
        d2 = ((points[covered] - points[j]) ** 2).sum(axis=1)
        out[j] = out[covered[np.lexsort((covered, d2))[:k]]].mean(axis=0)
    return out


def test_mean_aggregate_matches_loop_oracle(small_samples):
    s = small_samples[2]
    q = mean_aggregate(s.features, s.bundle, s.pc.points)
    np.testing.assert_allclose(q, _gather_oracle(s.features, s.bundle, s.pc.points), atol=1e-10)


def test_uncovered_points_take_neighbor_mean(small_samples):
    s = small_samples[0]
    corr = s.corr
    assert corr.uncovered.size > 0  # points hidden in every view exist on a sphere at 56 x 56
    vals = np.random.default_rng(0).random((s.bundle.K, *s.bundle.size))
    out = corr.gather_maps(vals)
    j, nb = corr.uncovered[0], corr.fill_index[0]
    np.testing.assert_allclose(out[j], out[nb].mean())


def test_g_aggregate_shapes(small_samples):
    s = small_samples[1]
    rep = g_aggregate(s.features, s.bundle, s.pc.points)
    n, d = s.pc.n, s.features.d
    assert rep.q.shape == rep.q_hat.shape == (n, d) and rep.neighbors.shape == (n, 10)
    np.testing.assert_allclose(rep.q_hat, 0.5 * rep.q + 0.5 * rep.q_tilde)


def test_feature_bundle_properties():
    fb = FeatureBundle(np.zeros((3, 5)), np.zeros((3, 2, 4, 5)), "toy")
    assert (fb.K, fb.h, fb.w, fb.d) == (3, 2, 4, 5)

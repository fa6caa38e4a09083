"""Independent brute-force oracles and the self-test suite built on them.

Every oracle here is written from the definition, without reusing the
vectorized code path it checks.
"""

from __future__ import annotations

import tempfile
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np


# -- oracles -----------------------------------------------------------------

def visibility_oracle(point_to_pixel: np.ndarray, depths: np.ndarray, frame: tuple[int, int]) -> np.ndarray:
    """Exhaustive per-pixel depth argmin; the lowest index wins exact ties."""
    H, W = frame
    n = point_to_pixel.shape[0]
    vis = np.zeros(n, dtype=np.uint8)
    best: dict = {}
    for j in range(n):
        r, c = int(point_to_pixel[j, 0]), int(point_to_pixel[j, 1])
        if not (0 <= r < H and 0 <= c < W):
            continue
        cur = best.get((r, c))
        if cur is None or depths[j] < depths[cur]:
            best[(r, c)] = j
    for j in best.values():
        vis[j] = 1
    return vis


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cell_probs(g_pair: np.ndarray, feats: np.ndarray, tau: float) -> np.ndarray:
    """Class probabilities of individual m x d features against C x d prompts."""
    g = g_pair / np.linalg.norm(g_pair, axis=1, keepdims=True)
    f = feats / np.linalg.norm(feats, axis=-1, keepdims=True)
    return _softmax_rows((f @ g.T) / tau)


def _nearest_covered(points: np.ndarray, covered: np.ndarray, j: int, k: int) -> np.ndarray:
    d = np.sqrt(((points[covered] - points[j]) ** 2).sum(axis=1))
    return covered[np.lexsort((covered, d))[:k]]


def point_seg_oracle(g_pair, features, bundle, points: np.ndarray, tau: float, k: int = 10) -> np.ndarray:
    """Per-point (normal, abnormal) probabilities straight from the point's pixels.

    For every view where a point is visible, the point is re-projected, the
    pixel center is mapped into the feature grid and the four surrounding cell
    probabilities are blended bilinearly. Views are averaged with equal weight;
    points seen by no view take the mean of their k nearest covered points.
    """
    g_pair = np.asarray(g_pair, dtype=np.float64)
    local = np.asarray(features.local_maps, dtype=np.float64)
    K, h, w, _ = local.shape
    n = points.shape[0]
    acc = np.zeros((n, g_pair.shape[0]))
    cnt = np.zeros(n)
    for v in range(K):
        t = bundle.transforms[v]
        H, W = t.H, t.W
        vis = np.asarray(bundle.renderings[v].visibility, dtype=bool)
        idx = np.flatnonzero(vis)
        rc, _ = t.project(points[idx])
        pix = np.floor(rc)
        sr = np.clip((pix[:, 0] + 0.5) * h / H - 0.5, 0, h - 1)
        sc = np.clip((pix[:, 1] + 0.5) * w / W - 0.5, 0, w - 1)
        r0, c0 = np.floor(sr).astype(int), np.floor(sc).astype(int)
        r1, c1 = np.minimum(r0 + 1, h - 1), np.minimum(c0 + 1, w - 1)
        fr, fc = (sr - r0)[:, None], (sc - c0)[:, None]
        p = ((1 - fr) * (1 - fc) * cell_probs(g_pair, local[v, r0, c0], tau)
             + (1 - fr) * fc * cell_probs(g_pair, local[v, r0, c1], tau)
             + fr * (1 - fc) * cell_probs(g_pair, local[v, r1, c0], tau)
             + fr * fc * cell_probs(g_pair, local[v, r1, c1], tau))
        acc[idx] += p
        cnt[idx] += 1
    out = acc / np.maximum(cnt, 1)[:, None]
    covered = np.flatnonzero(cnt > 0)
    for j in np.flatnonzero(cnt == 0):
        out[j] = out[_nearest_covered(points, covered, j, min(k, covered.size))].mean(axis=0)
    return out


def knn_oracle(points: np.ndarray, k: int) -> np.ndarray:
    """k nearest other points by full distance sort, lower index first on ties."""
    n = points.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    for j in range(n):
        d = np.sqrt(((points - points[j]) ** 2).sum(axis=1))
        d[j] = np.inf
        out[j] = np.lexsort((idx, d))[:k]
    return out


def smoothing_oracle(values: np.ndarray, points: np.ndarray, sigma: float, k: int) -> np.ndarray:
    """Dense Gaussian weights restricted to each point's k nearest points (itself included)."""
    n = points.shape[0]
    out = np.empty(n)
    idx = np.arange(n)
    for j in range(n):
        d2 = ((points - points[j]) ** 2).sum(axis=1)
        d2[j] = -1.0  # self first
        nb = np.lexsort((idx, d2))[:k]
        d2[j] = 0.0
        wts = np.exp(-d2[nb] / (2 * sigma**2))
        out[j] = (wts * values[nb]).sum() / wts.sum()
    return out


def auroc_pairwise(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return float((gt + 0.5 * eq) / (pos.size * neg.size))


def ap_sweep(scores, labels) -> float:
    """Precision at each distinct threshold times the recall gained there."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        pred = s >= t
        tp = (pred & y).sum()
        recall = tp / y.sum()
        total += (recall - prev_recall) * tp / pred.sum()
        prev_recall = recall
    return float(total)


def aupro_trapezoid(scores, region_mask, fpr_limit: float = 0.3) -> float:
    """Single-region PRO curve by explicit threshold sweep, trapezoids up to the limit."""
    s = np.asarray(scores, dtype=np.float64)
    reg = np.asarray(region_mask).astype(bool)
    pts = [(0.0, 0.0)]
    for t in sorted(set(s.tolist()), reverse=True):
        pred = s >= t
        pts.append(((pred & ~reg).sum() / (~reg).sum(), (pred & reg).sum() / reg.sum()))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        if x0 >= fpr_limit:
            break
        if x1 > fpr_limit:
            y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
            x1 = fpr_limit
        area += 0.5 * (x1 - x0) * (y0 + y1)
    return area / fpr_limit


def random_cloud(rng: np.random.Generator, n: int) -> np.ndarray:
    """Anisotropic Gaussian blob, sometimes with duplicated points to force depth ties."""
    pts = rng.normal(size=(n, 3)) * rng.uniform(0.3, 1.5, size=3)
    if n > 4 and rng.random() < 0.5:
        m = n // 10
        pts[rng.choice(n, m, replace=False)] = pts[rng.choice(n, m, replace=False)]
    return pts


# -- self-test ---------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


def check_visibility(n_clouds: int = 20, seed: int = 0):
    from .renderer import ViewTransform, compute_visibility, view_angles

    rng = np.random.default_rng(seed)
    for _ in range(n_clouds):
        pts = random_cloud(rng, int(rng.integers(5, 400)))
        K = int(rng.integers(1, 10))
        H, W = int(rng.integers(4, 40)), int(rng.integers(4, 40))
        for k, a in enumerate(view_angles(K)):
            t = ViewTransform.fit(pts, a, H, W)
            rc, depth = t.project(pts)
            pix = np.floor(rc).astype(np.int64)
            if not np.array_equal(compute_visibility(pix, depth, (H, W)), visibility_oracle(pix, depth, (H, W))):
                return False, f"mismatch at view {k}"
    return True, f"{n_clouds} clouds exact"


def _small_case(seed: int, n: int = 600, size: int = 56):
    from .data.synthetic import generate_synthetic_sample
    from .encoder import EncoderConfig, ToyBackbone, encode_bundle
    from .renderer import RenderConfig, render_bundle

    pc = generate_synthetic_sample(("sphere", "torus", "box", "cylinder")[seed % 4], "bump", n, seed=seed)
    bundle = render_bundle(pc, 9, RenderConfig(size=(size, size), splat_radius=2))
    bb = ToyBackbone(EncoderConfig(input_size=(size, size), seed=seed))
    return pc, bundle, bb, encode_bundle(bundle, bb)


def check_seg_paths(n_instances: int = 4, tol: float = 1e-5):
    from .point_repr import implicit_point_seg, per_view_seg

    worst = 0.0
    for i in range(n_instances):
        pc, bundle, bb, fb = _small_case(i)
        g = np.random.default_rng(i).normal(size=(2, fb.d))
        fast = implicit_point_seg(per_view_seg(g, fb, 0.01, bundle.size), bundle, pc.points).per_point
        ref = point_seg_oracle(g, fb, bundle, pc.points, 0.01)
        worst = max(worst, float(np.abs(fast - ref).max()))
    return worst <= tol, f"max abs error {worst:.2e}"


def check_gradients(n_coords: int = 64, tol: float = 1e-4):
    from .config import smoke_config
    from .pipeline import prepare_many
    from .prompts import init_prompts
    from .trainer import grad_check
    from .data.synthetic import generate_synthetic_sample
    from .encoder import make_backbone

    cfg = smoke_config({"render.size": [56, 56], "encoder.input_size": [56, 56]})
    bb = make_backbone(cfg.encoder)
    pcs = [generate_synthetic_sample("sphere", a, 1500, seed=i) for i, a in enumerate(("dent", "none"))]
    samples = prepare_many(pcs, bb, cfg)
    ps = init_prompts("object-agnostic", 12, seed=0, d_word=bb.cfg.d_word, backbone_id=bb.backbone_id)
    rep = grad_check(samples, bb, ps, "pointad+", n_coords=n_coords)
    return rep.max_rel_error <= tol, f"max rel error {rep.max_rel_error:.2e} over {n_coords} coords"


def check_metrics(n: int = 50, seed: int = 0):
    from .metrics import aupro, auroc, average_precision

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        m = int(rng.integers(4, 80))
        s = np.round(rng.random(m), int(rng.integers(1, 4)))
        y = rng.random(m) < rng.uniform(0.1, 0.9)
        y[0], y[1] = True, False
        worst = max(worst, abs(auroc(s, y) - auroc_pairwise(s, y)),
                    abs(average_precision(s, y) - ap_sweep(s, y)),
                    abs(aupro(s, y, fpr_limit=0.3) - aupro_trapezoid(s, y, 0.3)))
    return worst <= 1e-9, f"max deviation {worst:.2e}"


def check_aggregation(seed: int = 0):
    from .point_repr import fuse, gaussian_refine, knn_neighbors

    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(300, 3))
    nb = knn_neighbors(pts, 10)
    if not np.array_equal(nb, knn_oracle(pts, 10)):
        return False, "kNN differs from oracle"
    q = np.tile(rng.normal(size=(1, 8)), (300, 1))
    qt, w = gaussian_refine(q, pts, nb, 1.0)
    rows = float(np.abs(w.sum(axis=1) - 1).max())
    fixed = float(np.abs(fuse(qt, q, 0.5) - q).max())
    q2 = rng.normal(size=(300, 8))
    ident = float(np.abs(fuse(gaussian_refine(q2, pts, nb, 1.0)[0], q2, 0.0) - q2).max())
    return rows <= 1e-6 and fixed <= 1e-12 and ident == 0.0, (
        f"row-sum dev {rows:.1e}, fixed-point dev {fixed:.1e}, alpha=0 dev {ident:.1e}")


def check_cache_recovery():
    from .encoder import cache_features

    pc, bundle, bb, fb = _small_case(0, n=300, size=28)
    with tempfile.TemporaryDirectory() as d:
        cache_features(bundle, bb, d)
        path = next(Path(d).glob("*.feat"))
        raw = bytearray(path.read_bytes())
        raw[-5] ^= 0xFF
        path.write_bytes(bytes(raw))
        calls = bb.image_calls
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            again = cache_features(bundle, bb, d)
        recomputed = bb.image_calls > calls
        ok = recomputed and np.array_equal(again.local_maps, fb.local_maps) and any(
            "corrupted" in str(w.message) for w in caught)
    return ok, "corrupted entry recomputed" if ok else "corruption not detected"


CHECKS = {
    "visibility-oracle": check_visibility,
    "seg-path-equivalence": check_seg_paths,
    "gradient-check": check_gradients,
    "metric-oracles": check_metrics,
    "g-aggregation-invariants": check_aggregation,
    "feature-cache-recovery": check_cache_recovery,
}


def run_selftest(names: Optional[list[str]] = None, echo: Optional[Callable[[str], None]] = print) -> list[CheckResult]:
    results = []
    for name in names or list(CHECKS):
        r = _timed(name, CHECKS[name])
        results.append(r)
        if echo is not None:
            echo(f"{'PASS' if r.passed else 'FAIL'}  {name:<26} {r.detail} ({r.seconds:.1f}s)")
    return results

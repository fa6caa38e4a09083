"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or ``python tests/test_acceptance.py``.
The lines are also repeated in the terminal summary of any pytest run.
"""

import math
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from pointad.checks import (
    ap_sweep,
    aupro_trapezoid,
    auroc_pairwise,
    point_seg_oracle,
    random_cloud,
    visibility_oracle,
)
from pointad.data import generate_synthetic_sample
from pointad.encoder import EncoderConfig, ToyBackbone, encode_bundle, make_backbone, text_embeddings
from pointad.experiment import SmokeSetup, run_smoke
from pointad.inference import (
    combine,
    fuse_m3d,
    global_score,
    median_nn_distance,
    score_3d,
    score_m3d,
    smooth_point_map,
    smoothing_graph,
)
from pointad.losses import (
    CROSS_TAU,
    DICE_EPS,
    TERMS,
    dice_loss,
    focal_loss,
    loss_cross,
    loss_e3d_local,
    loss_i2d_global,
    loss_i2d_local,
    loss_i3d_global,
    loss_i3d_local,
    total_loss,
)
from pointad.metrics import aupro, auroc, average_precision
from pointad.point_repr import (
    DEFAULT_ALPHA,
    DEFAULT_K,
    DEFAULT_SIGMA,
    fuse,
    gaussian_refine,
    implicit_point_seg,
    knn_neighbors,
    per_view_seg,
)
from pointad.prompts import init_prompts
from pointad.renderer import RenderConfig, ViewTransform, compute_visibility, render_bundle, view_angles
from pointad.trainer import grad_check

from conftest import small_config
from test_losses import ce_oracle, cross_oracle, dice_oracle, focal_oracle

REPORT: list[str] = []

# thresholds frozen after the first verified smoke run of the shipped seed
SMOKE_P_AUROC = 0.75
SMOKE_I_AUROC = 0.70
SMOKE_LOSS_DROP = 0.30


def report(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {num}: {title} | {detail}"
    print(line)
    REPORT.append(line)
    assert ok, line


# -- 1 -------------------------------------------------------------------------

def test_criterion_1_visibility_oracle():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    mismatches, views = 0, 0
    for _ in range(100):
        pts = random_cloud(rng, int(rng.integers(1, 2001)))
        K = int(rng.integers(1, 10))
        H, W = int(rng.integers(8, 80)), int(rng.integers(8, 80))
        for a in view_angles(K):
            t = ViewTransform.fit(pts, a, H, W)
            rc, depth = t.project(pts)
            pix = np.floor(rc).astype(np.int64)
            mismatches += not np.array_equal(compute_visibility(pix, depth, (H, W)),
                                             visibility_oracle(pix, depth, (H, W)))
            views += 1
    dt = time.perf_counter() - t0
    report(1, "visibility equals exhaustive depth-argmin oracle", mismatches == 0 and dt < 30,
           f"{views} views on 100 clouds, {mismatches} mismatches, {dt:.1f}s (limit 30s)")


# -- 2 -------------------------------------------------------------------------

def _seg_instance(i):
    shape = ("sphere", "torus", "box", "cylinder")[i % 4]
    size = (28, 56, 84)[i % 3]
    pc = generate_synthetic_sample(shape, ("dent", "bump", "crack", "none")[i % 4], 400 + 150 * i, seed=i)
    bundle = render_bundle(pc, 1 + i % 9, RenderConfig(size=(size, size), splat_radius=i % 3))
    bb = ToyBackbone(EncoderConfig(input_size=(size, size), seed=i))
    fb = encode_bundle(bundle, bb)
    g = np.random.default_rng(i).normal(size=(2, fb.d))
    tau = (0.01, 0.05, 0.2)[i % 3]
    return pc, bundle, fb, g, tau


def test_criterion_2_segmentation_paths():
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(20):
        pc, bundle, fb, g, tau = _seg_instance(i)
        fast = implicit_point_seg(per_view_seg(g, fb, tau, bundle.size), bundle, pc.points).per_point
        worst = max(worst, float(np.abs(fast - point_seg_oracle(g, fb, bundle, pc.points, tau)).max()))
    pc = generate_synthetic_sample("sphere", "dent", 50_000, seed=0)
    bundle = render_bundle(pc, 9, RenderConfig())
    fb = encode_bundle(bundle, ToyBackbone(EncoderConfig()))
    g = np.random.default_rng(0).normal(size=(2, fb.d))
    fast_t = []
    for _ in range(3):
        t = time.perf_counter()
        fast = implicit_point_seg(per_view_seg(g, fb, 0.01, bundle.size), bundle, pc.points).per_point
        fast_t.append(time.perf_counter() - t)
    t = time.perf_counter()
    ref = point_seg_oracle(g, fb, bundle, pc.points, 0.01)
    slow_t = time.perf_counter() - t
    big_err = float(np.abs(fast - ref).max())
    speedup = slow_t / min(fast_t)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-5 and big_err <= 1e-5 and speedup >= 10 and dt < 120
    report(2, "feature-space seg path equals per-point oracle and is faster", ok,
           f"max abs err {worst:.1e} on 20 instances, {big_err:.1e} at n=50000 K=9 336x336; "
           f"speedup {speedup:.0f}x (need 10x); {dt:.0f}s (limit 120s)")


# -- 3 -------------------------------------------------------------------------

def _gradient_report():
    cfg = small_config()
    bb = make_backbone(cfg.encoder)
    pcs = [generate_synthetic_sample("sphere", a, 1500, seed=i) for i, a in enumerate(("dent", "none"))]
    from pointad.pipeline import prepare_many

    samples = prepare_many(pcs, bb, cfg)
    ps = init_prompts("object-agnostic", 12, seed=0, d_word=bb.cfg.d_word, backbone_id=bb.backbone_id)
    return grad_check(samples, bb, ps, "pointad+", n_coords=64)


def test_criterion_3_gradient_check():
    t0 = time.perf_counter()
    rep = _gradient_report()
    dt = time.perf_counter() - t0
    report(3, "analytic prompt gradients match central differences",
           rep.max_rel_error <= 1e-4 and rep.coords.size >= 64 and dt < 60,
           f"max rel err {rep.max_rel_error:.1e} over {rep.coords.size} coords, all six terms; "
           f"{dt:.1f}s (limit 60s)")


# -- 4 -------------------------------------------------------------------------

def test_criterion_4_g_aggregation_invariants():
    rng = np.random.default_rng(4)
    row_dev, fixed_dev, ident_dev = 0.0, 0.0, 0.0
    for i in range(20):
        n = int(rng.integers(20, 600))
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.05, 20)
        nb = knn_neighbors(pts, DEFAULT_K)
        q = rng.normal(size=(n, 16))
        qt, w = gaussian_refine(q, pts, nb, DEFAULT_SIGMA)
        row_dev = max(row_dev, float(np.abs(w.sum(axis=1) - 1).max()))
        const = np.tile(rng.normal(size=(1, 16)), (n, 1))
        ct, _ = gaussian_refine(const, pts, nb, DEFAULT_SIGMA)
        fixed_dev = max(fixed_dev, float(np.abs(fuse(ct, const, DEFAULT_ALPHA) - const).max()))
        ident_dev = max(ident_dev, float(np.abs(fuse(qt, q, 0.0) - q).max()))
    defaults = (DEFAULT_K, DEFAULT_ALPHA, DEFAULT_SIGMA) == (10, 0.5, 1.0)
    report(4, "G-aggregation invariants", row_dev <= 1e-6 and fixed_dev == 0 and ident_dev == 0 and defaults,
           f"row-sum dev {row_dev:.1e}, constant fixed-point dev {fixed_dev:.0e}, alpha=0 dev {ident_dev:.0e}, "
           f"defaults (k, alpha, sigma) = ({DEFAULT_K}, {DEFAULT_ALPHA}, {DEFAULT_SIGMA})")


# -- 5 -------------------------------------------------------------------------

def _f(x):
    return float(x)


def _loss_examples():
    """(name, passed) for every closed-form and oracle example of the loss terms."""
    rng = np.random.default_rng(5)
    out = []
    y = np.array([1.0, 0, 1, 1, 0])
    out.append(("dice perfect", _f(dice_loss(y, y)) == 0.0))
    out.append(("dice inverted", abs(_f(dice_loss(1 - y, y)) - 1) < 1e-6))
    N = 16
    t = np.r_[np.ones(N // 2), np.zeros(N // 2)]
    closed = 1 - (N / 2 + DICE_EPS) / (N / 2 + N / 2 + DICE_EPS)
    out.append(("dice half", abs(_f(dice_loss(np.full(N, 0.5), t)) - closed) < 1e-6
                and abs(closed - dice_oracle(np.full(N, 0.5), t)) < 1e-12))
    yl = rng.integers(0, 2, 30)
    out.append(("focal perfect", _f(focal_loss(np.stack([1 - yl, yl], -1).astype(float), yl)) < 1e-12))
    out.append(("focal half", abs(_f(focal_loss(np.full((30, 2), 0.5), yl)) - 0.25 * math.log(2)) < 1e-6))
    p = rng.random(30)
    pair = np.stack([1 - p, p], -1)
    ce = np.mean([-math.log(pair[i, yl[i]]) for i in range(30)])
    out.append(("focal gamma 0 is CE", abs(_f(focal_loss(pair, yl, gamma=0.0)) - ce) < 1e-6))
    out.append(("i3d global confident", _f(loss_i3d_global(np.array([[0.0, 1.0]] * 4), 1)) < 1e-6))
    out.append(("i3d global label 0", _f(loss_i3d_global(np.array([[1.0, 0.0]] * 4), 0)) < 1e-6))
    out.append(("i3d global mean then CE",
                abs(_f(loss_i3d_global(np.array([[0.0, 1.0], [1.0, 0.0]]), 1)) - math.log(2)) < 1e-6))
    a, yy = rng.random(40), rng.integers(0, 2, 40)
    ref = dice_oracle(1 - a, 1 - yy) + dice_oracle(a, yy)
    yb = yy.astype(float)
    for name, fn in (("i3d local", loss_i3d_local), ("e3d local", loss_e3d_local)):
        out.append((f"{name} perfect", _f(fn(1 - yb, yb, yb)) == 0.0))
        out.append((f"{name} inverted", abs(_f(fn(yb, 1 - yb, yb)) - 2) < 1e-5))
        out.append((f"{name} oracle", abs(_f(fn(1 - a, a, yy)) - ref) < 1e-6))
    out.append(("i2d global correct", _f(loss_i2d_global(np.array([[1.0, 0], [0, 1.0]]), np.array([0, 1]))) < 1e-6))
    wrong = _f(loss_i2d_global(np.array([[1.0, 0], [1.0, 0]]), np.array([0, 1])))
    out.append(("i2d global clamp keeps it finite", math.isfinite(wrong) and wrong > 8))
    vp, vl = rng.random(9), rng.integers(0, 2, 9)
    vpair = np.stack([1 - vp, vp], -1)
    out.append(("i2d global per-view oracle", abs(_f(loss_i2d_global(vpair, vl))
                                                  - np.mean([ce_oracle(vpair[k], vl[k]) for k in range(9)])) < 1e-6))
    m = (rng.random((3, 8, 8)) < 0.2).astype(float)
    out.append(("i2d local perfect", _f(loss_i2d_local(np.stack([1 - m, m], -1), m)) < 1e-6))
    empty = np.zeros((1, 4, 4))
    s0 = np.stack([np.ones((1, 4, 4)), np.zeros((1, 4, 4))], -1)
    out.append(("i2d local all-normal view", _f(loss_i2d_local(s0, empty)) < 1e-6))
    sp = rng.random((3, 8, 8))
    s = np.stack([1 - sp, sp], -1)
    ref = np.mean([focal_oracle(s[k], m[k]) + dice_oracle(s[k, ..., 0], 1 - m[k]) + dice_oracle(s[k, ..., 1], m[k])
                   for k in range(3)])
    out.append(("i2d local oracle", abs(_f(loss_i2d_local(s, m)) - ref) < 1e-6))
    v = rng.normal(size=6)
    out.append(("cross identical", abs(_f(loss_cross(v, v, v, v)) - 4 * math.log(2)) < 1e-12))
    rn, ra = np.eye(3)[0], np.eye(3)[1]
    closed = 4 * -math.log(1 / (1 + math.exp(-1 / CROSS_TAU)))
    out.append(("cross aligned minimum", abs(_f(loss_cross(rn, ra, rn, ra)) - closed) < 1e-6))
    gg = rng.normal(size=(4, 8))
    out.append(("cross oracle", abs(_f(loss_cross(*gg)) - cross_oracle(*gg)) < 1e-6))
    gt = torch.tensor(gg, requires_grad=True)
    loss_cross(*gt).backward()
    h = 1e-6
    xp, xm = gg.copy(), gg.copy()
    xp[1, 0] += h
    xm[1, 0] -= h
    num = (cross_oracle(*xp) - cross_oracle(*xm)) / (2 * h)
    out.append(("cross gradient sign", np.sign(num) == np.sign(float(gt.grad[1, 0]))))
    out.append(("total zero", _f(total_loss({k: torch.zeros(()) for k in TERMS})[0]) == 0.0))
    tot, rep = total_loss({k: torch.ones(()) for k in TERMS})
    out.append(("total unit", _f(tot) == 6.0))
    parts = {k: torch.tensor(i / 10) for i, k in enumerate(TERMS)}
    rep = total_loss(parts)[1]
    out.append(("report fields", all(getattr(rep, k) == _f(parts[k]) for k in TERMS)))
    return out


def test_criterion_5_loss_suite():
    results = _loss_examples()
    failed = [name for name, ok in results if not ok]
    report(5, "loss examples and oracles", not failed,
           f"{len(results) - len(failed)}/{len(results)} examples pass" + (f"; failed: {failed}" if failed else ""))


# -- 6 -------------------------------------------------------------------------

def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(6)
    au, ap, pro = 0.0, 0.0, 0.0
    for _ in range(200):
        n = int(rng.integers(4, 200))
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        y = rng.random(n) < rng.uniform(0.05, 0.95)
        y[0], y[1] = True, False
        au = max(au, abs(auroc(s, y) - auroc_pairwise(s, y)))
        ap = max(ap, abs(average_precision(s, y) - ap_sweep(s, y)))
        lim = float(rng.choice([0.05, 0.3, 1.0]))
        pro = max(pro, abs(aupro(s, y, fpr_limit=lim) - aupro_trapezoid(s, y, lim)))
    n = 20000
    lab = np.zeros(n, int)
    lab[: n // 2] = 1
    regions = np.where(lab > 0, np.arange(n) // 500, -1)
    rand = aupro(rng.random(n), regions=regions, fpr_limit=1.0)
    ok = au <= 1e-9 and ap <= 1e-9 and pro <= 1e-6 and abs(rand - 0.5) <= 0.05
    report(6, "metric oracles", ok,
           f"AUROC dev {au:.1e}, AP dev {ap:.1e}, single-region AUPRO dev {pro:.1e} on 200 instances; "
           f"random-score AUPRO {rand:.3f} (fpr_limit 1)")


# -- 7 and 9 (shared smoke runs) -----------------------------------------------

@pytest.fixture(scope="module")
def smoke_runs():
    runs = []
    with tempfile.TemporaryDirectory() as d:
        for r in range(2):
            out = Path(d) / f"run{r}"
            o = run_smoke(SmokeSetup(), out_dir=out)
            runs.append((o, (out / "last.ckpt").read_bytes()))
    return runs


def test_criterion_7_end_to_end_smoke(smoke_runs):
    o, _ = smoke_runs[0]
    m = o.metrics
    ok = (o.loss_drop >= SMOKE_LOSS_DROP and m["p_auroc"] >= SMOKE_P_AUROC and m["i_auroc"] >= SMOKE_I_AUROC
          and o.seconds["total"] < 600 and len(o.epoch_means) == 15)
    report(7, "smoke run: torus prompts tested on spheres", ok,
           f"loss {o.epoch_means[0]:.3f} -> {o.epoch_means[-1]:.3f} (drop {100 * o.loss_drop:.0f}%, need 30%); "
           f"P-AUROC {m['p_auroc']:.3f} (need {SMOKE_P_AUROC}); I-AUROC {m['i_auroc']:.3f} "
           f"(need {SMOKE_I_AUROC}); {o.seconds['total']:.0f}s (limit 600s)")


def test_smoke_dented_sphere_peak_inside_patch(smoke_runs):
    """Regression bound frozen from the shipped run: the first dented test sphere peaks in its dent."""
    o, _ = smoke_runs[0]
    i = next(k for k, s in enumerate(o.scores) if s.sample_id.startswith("sphere_dent"))
    assert o.labels[i][np.argmax(o.scores[i].point_map)] == 1


# -- 8 -------------------------------------------------------------------------

def test_criterion_8_m3d_plug_and_play(small_samples, small_cfg, small_backbone):
    import dataclasses

    text = text_embeddings(small_backbone, init_prompts(d_word=small_backbone.cfg.d_word,
                                                        backbone_id=small_backbone.backbone_id))
    checks = {}
    same_3d, in_range = True, True
    for s in small_samples:
        r = s.bundle.renderings[4]
        pc = dataclasses.replace(s.pc, rgb=r.image.astype(np.float64), rgb_index=r.point_to_pixel,
                                 meta=dict(s.pc.meta))
        plain = score_3d(s.pc, s.bundle, s.features, text, "pointad+", small_cfg, s.corr, s.explicit)
        m3d = score_m3d(pc, s.bundle, s.features, text, small_backbone, "pointad+", small_cfg, s.corr, s.explicit)
        same_3d &= (np.array_equal(plain.point_map, m3d.point_map) and plain.global_score == m3d.global_score
                    and np.array_equal(plain.raw_map, m3d.raw_map))
        in_range &= bool(0 <= m3d.fused_map.min() and m3d.fused_map.max() <= 1 and 0 <= m3d.fused_score <= 1)
    checks["rendered-view rgb leaves 3D outputs unchanged"] = same_3d
    rng = np.random.default_rng(8)
    for _ in range(200):
        n = int(rng.integers(12, 300))
        pts = rng.normal(size=(n, 3))
        f, sc = fuse_m3d(rng.random(n), rng.random(n), rng.random(), rng.random(), pts,
                         median_nn_distance(pts), smoothing_graph(pts))
        in_range &= bool(0 <= f.min() and f.max() <= 1 and 0 <= sc <= 1)
    checks["fused outputs in [0, 1]"] = in_range
    pts = rng.normal(size=(500, 3))
    raw = np.where(pts[:, 0] > 0, 0.7, 0.2)
    graph, sig = smoothing_graph(pts), median_nn_distance(pts)
    pm = smooth_point_map(raw, pts, sig, graph=graph)
    fused, _ = fuse_m3d(raw, pm, 0.5, 0.5, pts, sig, graph)
    flat = np.array([np.unique(raw[graph[graph[j]]]).size == 1 for j in range(500)])
    checks["equal-input fusion degeneracy"] = bool(np.abs(fused[flat] - pm[flat]).max() <= 1e-6)
    s = small_samples[0]
    res = score_3d(s.pc, s.bundle, s.features, text, "pointad", small_cfg, s.corr)
    raw_plus, vm_plus = combine(res.s_map, res.s_map, res.view_abnormal, "pointad+")
    pmap_plus = smooth_point_map(raw_plus, s.pc.points, res.meta["sigma_s"])
    checks["pointad and pointad+ agree when T_a = S_a"] = (
        np.array_equal(pmap_plus, res.point_map) and global_score(vm_plus, pmap_plus) == res.global_score)
    failed = [k for k, v in checks.items() if not v]
    report(8, "M3D plug-and-play invariants", not failed,
           "; ".join(f"{k}: {'ok' if v else 'violated'}" for k, v in checks.items()))


# -- 9 -------------------------------------------------------------------------

def test_criterion_9_reproducibility(smoke_runs):
    g1, g2 = _gradient_report(), _gradient_report()
    grads_same = (g1.analytic.tobytes() == g2.analytic.tobytes() and g1.numeric.tobytes() == g2.numeric.tobytes())
    (a, ca), (b, cb) = smoke_runs
    ckpt_same = ca == cb
    scores_same = all(x.point_map.tobytes() == y.point_map.tobytes() and x.global_score == y.global_score
                      for x, y in zip(a.scores, b.scores))
    report(9, "seeded reruns are bit-identical", grads_same and ckpt_same and scores_same,
           f"gradient check {'identical' if grads_same else 'differs'}; smoke checkpoint "
           f"{'identical' if ckpt_same else 'differs'}; smoke scores {'identical' if scores_same else 'differ'}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))

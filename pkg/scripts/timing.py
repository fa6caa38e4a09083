"""Per-stage wall time for one cloud at full resolution (default: 336x336, 9 views).

    python scripts/timing.py --points 50000
"""

import argparse
import time

import numpy as np

from pointad.config import RunConfig
from pointad.data import generate_synthetic_sample
from pointad.encoder import encode_bundle, make_backbone, text_embeddings
from pointad.inference import score_3d
from pointad.point_repr import correspondence, g_aggregate, implicit_point_seg, per_view_seg
from pointad.prompts import init_prompts
from pointad.renderer import render_bundle
from pointad.checks import point_seg_oracle


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--points", type=int, default=50_000)
    ap.add_argument("--views", type=int, default=9)
    ap.add_argument("--size", type=int, default=336)
    ap.add_argument("--oracle", action="store_true", help="also time the per-point reference path")
    args = ap.parse_args()
    cfg = RunConfig().override({"views": args.views, "render.size": (args.size, args.size),
                                "encoder.input_size": (args.size, args.size)})
    backbone = make_backbone(cfg.encoder)
    pc = generate_synthetic_sample("sphere", "dent", args.points, seed=0)
    times = {}

    def timed(name, fn):
        t = time.perf_counter()
        out = fn()
        times[name] = time.perf_counter() - t
        return out

    bundle = timed("render", lambda: render_bundle(pc, cfg.views, cfg.render))
    fb = timed("encode", lambda: encode_bundle(bundle, backbone))
    agg = cfg.aggregation
    corr = timed("correspondence", lambda: correspondence(bundle, pc.points, agg.k))
    explicit = timed("g_aggregate", lambda: g_aggregate(fb, bundle, pc.points, agg.k, agg.alpha, agg.sigma,
                                                        corr=corr))
    text = text_embeddings(backbone, init_prompts(d_word=backbone.cfg.d_word, backbone_id=backbone.backbone_id))
    timed("score_3d", lambda: score_3d(pc, bundle, fb, text, "pointad+", cfg, corr, explicit))
    tau = backbone.cfg.temperature
    timed("point_seg_fast", lambda: implicit_point_seg(per_view_seg(text.vectors[:2], fb, tau, bundle.size),
                                                       bundle, pc.points))
    if args.oracle:
        timed("point_seg_oracle", lambda: point_seg_oracle(text.vectors[:2], fb, bundle, pc.points, tau))
    for name, t in times.items():
        print(f"{name:18s} {t:8.3f}s")
    if args.oracle:
        print(f"oracle / fast ratio {times['point_seg_oracle'] / times['point_seg_fast']:.1f}x")
    print(f"total (without oracle) {np.sum([t for k, t in times.items() if k != 'point_seg_oracle']):.2f}s")


if __name__ == "__main__":
    main()

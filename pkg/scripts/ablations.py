"""Ablations on the smoke setup.

Studies that change training (views, prompt length, variant) retrain per setting. Studies that
only change the test condition (lighting, point density) train once and rescore.

    python scripts/ablations.py views
    python scripts/ablations.py lighting
    python scripts/ablations.py density
    python scripts/ablations.py prompt_length
    python scripts/ablations.py variant
"""

import argparse
import dataclasses
import json
from pathlib import Path

from pointad.data.preprocess import farthest_point_sample
from pointad.encoder import make_backbone
from pointad.experiment import SmokeSetup, run_smoke, score_prepared, smoke_clouds
from pointad.pipeline import prepare_many
from pointad.renderer import LIGHTING_PRESETS
from pointad.trainer import train_prepared

RETRAIN = {
    "views": ("views", [1, 3, 5, 7, 9]),
    "prompt_length": ("prompts.length", [4, 8, 12, 16]),
    "variant": ("train.variant", ["pointad", "pointad+"]),
}
DENSITY_RATIOS = [1.0, 0.5, 0.25, 0.125]


def retrain_study(name, setup):
    key, values = RETRAIN[name]
    rows = []
    for v in values:
        o = run_smoke(dataclasses.replace(setup, overrides=((key, v),)))
        rows.append({name: v, **o.metrics})
    return rows


def test_condition_study(name, setup):
    cfg = setup.config()
    backbone = make_backbone(cfg.encoder)
    train_pcs, test_pcs = smoke_clouds(setup)
    prompts = train_prepared(prepare_many(train_pcs, backbone, cfg), backbone, cfg).prompts
    rows = []
    if name == "lighting":
        for preset in LIGHTING_PRESETS:
            test_cfg = cfg.override({"render.lighting": preset})
            _, _, m = score_prepared(prepare_many(test_pcs, backbone, test_cfg), prompts, backbone, test_cfg)
            rows.append({name: preset, **m})
    else:
        for ratio in DENSITY_RATIOS:
            pcs = [farthest_point_sample(pc, ratio, seed=0) if ratio < 1 else pc for pc in test_pcs]
            _, _, m = score_prepared(prepare_many(pcs, backbone, cfg), prompts, backbone, cfg)
            rows.append({name: ratio, **m})
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("study", choices=[*RETRAIN, "lighting", "density"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--points", type=int, default=8000)
    ap.add_argument("--out", type=Path, default=None, help="write the rows as JSON")
    args = ap.parse_args()
    setup = SmokeSetup(n_points=args.points, seed=args.seed)
    study = retrain_study if args.study in RETRAIN else test_condition_study
    rows = study(args.study, setup)
    print(f"{args.study:>14s}  I-AUROC  P-AUROC    AUPRO       AP")
    for r in rows:
        print(f"{str(r[args.study]):>14s}  {r['i_auroc']:7.3f}  {r['p_auroc']:7.3f}  "
              f"{r['aupro']:7.3f}  {r['ap']:7.3f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()

"""Torus-trained prompts scored on spheres, over several seeds.

    python scripts/smoke.py --seeds 0 1 2 --out runs/smoke
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from pointad.experiment import SmokeSetup, run_smoke


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--aux", default="torus")
    ap.add_argument("--test", default="sphere")
    ap.add_argument("--points", type=int, default=8000)
    ap.add_argument("--mode", choices=["pointad", "pointad+"], default=None)
    ap.add_argument("--out", type=Path, default=None, help="write checkpoints and summary.json here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    rows = []
    for seed in args.seeds:
        setup = SmokeSetup(aux_class=args.aux, test_class=args.test, n_points=args.points, seed=seed)
        out = args.out / f"seed{seed}" if args.out else None
        o = run_smoke(setup, out_dir=out, mode=args.mode)
        row = {"seed": seed, "loss_first": o.epoch_means[0], "loss_last": o.epoch_means[-1],
               "loss_drop": o.loss_drop, **o.metrics, "seconds": o.seconds["total"]}
        rows.append(row)
        print(f"seed {seed}: loss {row['loss_first']:.3f} -> {row['loss_last']:.3f}  "
              f"I-AUROC {row['i_auroc']:.3f}  AP {row['ap']:.3f}  P-AUROC {row['p_auroc']:.3f}  "
              f"AUPRO {row['aupro']:.3f}  ({row['seconds']:.0f}s)")
    if len(rows) > 1:
        for key in ("i_auroc", "ap", "p_auroc", "aupro"):
            v = np.array([r[key] for r in rows])
            print(f"{key:8s} mean {v.mean():.3f}  std {v.std():.3f}  min {v.min():.3f}  max {v.max():.3f}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "summary.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()

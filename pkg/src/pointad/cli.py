"""``pointad`` command line: render, train, infer, eval, protocol, synth, selftest."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigKeyError, RunConfig, smoke_config

log = logging.getLogger("pointad")

CACHE_ENV = "POINTAD_CACHE"


class CLIError(RuntimeError):
    pass


# -- config plumbing ---------------------------------------------------------

def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like 336x336, got {text!r}") from exc


def parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise CLIError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else (smoke_config() if args.smoke else RunConfig())
    over = parse_set(args.set)
    flag_map = {
        "views": "views", "lighting": "render.lighting", "size": "render.size",
        "aux_class": "train.aux_class", "variant": "train.variant", "epochs": "train.epochs",
        "seed": "train.seed", "fpr_limit": "eval.fpr_limit", "backend": "encoder.backend",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            over[key] = list(v) if isinstance(v, tuple) else v
    if "render.size" in over and "encoder.input_size" not in over:
        over["encoder.input_size"] = over["render.size"]
    cache = getattr(args, "cache", None) or os.environ.get(CACHE_ENV)
    if cache:
        over["cache_dir"] = cache
    return cfg.override(over) if over else cfg


def write_outputs(out_dir: Path, files, cfg: Optional[RunConfig], command: str) -> Path:
    """``outputs.json`` listing every produced file and the config fingerprint."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "outputs.json"
    prev = json.loads(path.read_text()) if path.exists() else {"files": []}
    names = sorted(set(prev.get("files", [])) | {str(Path(f).relative_to(out_dir)) if Path(f).is_relative_to(out_dir)
                                                 else str(f) for f in files})
    data = {"command": command, "files": names}
    if cfg is not None:
        data["config_fingerprint"] = cfg.fingerprint()
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        if "config.json" not in names:
            data["files"] = sorted(names + ["config.json"])
    path.write_text(json.dumps(data, indent=2))
    return path


def _manifest(path):
    from .data.io import load_manifest

    return load_manifest(path)


def _cache_root(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.cache_dir) if cfg.cache_dir else out / "cache"


# -- commands ----------------------------------------------------------------

def cmd_render(args) -> int:
    from .pipeline import cache_dirs
    from .renderer import render_bundle

    cfg = build_config(args)
    manifest = _manifest(args.manifest)
    out = Path(args.out)
    render_dir, _ = cache_dirs(cfg, _cache_root(cfg, out))
    hits = 0
    samples = manifest.select()
    for s in samples:
        t0 = time.perf_counter()
        pc = manifest.load(s)
        b = render_bundle(pc, cfg.views, cfg.render, cache_dir=render_dir)
        hits += b.from_cache
        print(f"{s.sample_id}: {b.K} views {b.size[0]}x{b.size[1]} "
              f"{'cache hit' if b.from_cache else 'rendered'} {time.perf_counter() - t0:.2f}s")
    print(f"{len(samples)} samples, {hits} cache hits")
    write_outputs(out, [render_dir], cfg, "render")
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    cfg = build_config(args)
    if not cfg.train.aux_class:
        raise CLIError("--aux-class is required (or train.aux_class in the config)")
    manifest = _manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = _cache_root(cfg, out)
    res = train(manifest, cfg.override({"cache_dir": str(cache)}), out_dir=out / "checkpoints",
                resume=args.resume, log_path=out / "train_log.jsonl")
    epochs = sorted({r["epoch"] for r in res.log})
    for e, m in zip(epochs, res.epoch_means()):
        print(f"epoch {e + 1}: mean total loss {m:.4f}")
    print(f"backbone checksum {res.backbone_checksum[:16]} unchanged")
    write_outputs(out, [out / "train_log.jsonl", *res.checkpoints, out / "checkpoints" / "last.ckpt"], cfg, "train")
    return 0


def _inputs(path: Path, args):
    """Point clouds from a manifest (test split) or a single PLY."""
    from .data.io import load_point_cloud

    if path.suffix == ".json":
        m = _manifest(path)
        for s in m.select(splits=("test",)):
            yield m.load(s)
        return
    rgb_index = np.load(args.rgb_index) if args.rgb_index else None
    yield load_point_cloud(path, format=args.format, rgb_path=args.rgb, rgb_index=rgb_index)


def cmd_infer(args) -> int:
    from .encoder import make_backbone, text_embeddings
    from .inference import score_cloud, write_heatmaps, write_scores
    from .prompts import load_checkpoint

    cfg = build_config(args)
    backbone = make_backbone(cfg.encoder)
    prompts, _, info = load_checkpoint(args.checkpoint, {"backbone_id": backbone.backbone_id})
    variant = args.variant or info.get("variant", cfg.train.variant)
    text = text_embeddings(backbone, prompts)
    out = Path(args.out)
    cache = _cache_root(cfg, out)
    files = []
    for pc in _inputs(Path(args.input), args):
        if args.mode == "m3d" and pc.rgb is None:
            raise CLIError(f"{pc.sample_id}: --mode m3d needs an RGB image aligned with the points")
        res = score_cloud(pc, backbone, text, cfg, variant, args.mode, cache)
        files += write_scores(out / "scores", res, {"checkpoint": str(args.checkpoint)})
        line = f"{pc.sample_id}: global score {res.global_score:.4f}"
        if res.has_rgb:
            line += f" fused score {res.fused_score:.4f}"
        print(line)
        if args.emit_maps:
            from .renderer import render_bundle
            from .pipeline import cache_dirs

            bundle = render_bundle(pc, cfg.views, cfg.render, cache_dir=cache_dirs(cfg, cache)[0])
            files += write_heatmaps(Path(args.emit_maps), res, bundle)
            files += write_scores(Path(args.emit_maps), res)
    write_outputs(out, files, cfg, "infer")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_predictions

    cfg = build_config(args)
    if args.protocol == "cross-dataset":
        if len(args.manifests) != 2:
            raise CLIError("--protocol cross-dataset needs two manifests: source then target")
        target = _manifest(args.manifests[1])
        classes = None
    else:
        if len(args.manifests) != 1:
            raise CLIError("--protocol one-vs-rest takes one manifest")
        target = _manifest(args.manifests[0])
        classes = [c for c in target.classes() if c != cfg.train.aux_class]
    res = evaluate_predictions(args.pred_dir, target, classes, cfg.eval.fpr_limit, cfg.eval.region_k,
                               args.mode, args.protocol,
                               [cfg.train.aux_class] if cfg.train.aux_class else [])
    print(res.table())
    out = Path(args.out) if args.out else Path(args.pred_dir)
    write_outputs(out, res.save(out), cfg, "eval")
    return 0 if not res.missing else 1


def cmd_protocol(args) -> int:
    from .metrics import run_protocol

    cfg = build_config(args)
    manifests = [_manifest(p) for p in args.manifests]
    out = Path(args.out)
    aux = args.aux_classes.split(",") if args.aux_classes else [cfg.train.aux_class]
    res = run_protocol(manifests if len(manifests) > 1 else manifests[0], cfg, args.protocol, aux,
                       checkpoint_dir=out / "checkpoints", modality=args.mode, cache_dir=_cache_root(cfg, out))
    print(res.table())
    write_outputs(out, res.save(out), cfg, "protocol")
    return 0


def cmd_synth(args) -> int:
    from .data.io import DatasetManifest, Sample, save_point_cloud, save_rgb
    from .data.synthetic import generate_synthetic_sample
    from .renderer import RenderConfig, ViewTransform

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    anomalies = args.anomalies.split(",")
    samples = []
    for ci, shape in enumerate(args.classes.split(",")):
        for i in range(args.per_class):
            seed = args.seed * 100003 + ci * 1000 + i
            kind = "none" if i % args.normal_every == 0 else anomalies[i % len(anomalies)]
            pc = generate_synthetic_sample(shape, kind, args.points, seed=seed)
            sid = f"{shape}_{i:03d}_{kind}"
            save_point_cloud(out / f"{sid}.ply", pc)
            np.save(out / f"{sid}.labels.npy", pc.labels)
            s = Sample(points=f"{sid}.ply", class_name=shape, split=args.split, labels=f"{sid}.labels.npy",
                       sample_id=sid)
            if args.rgb:
                H, W = args.rgb
                t = ViewTransform.fit(pc.points, 0.0, H, W)
                from .renderer import render_view

                r = render_view(pc, t, RenderConfig(size=(H, W), splat_radius=2))
                save_rgb(out / f"{sid}.png", r.image)
                idx = np.clip(np.floor(t.project(pc.points)[0]).astype(np.int64), 0, [H - 1, W - 1])
                np.save(out / f"{sid}.rgbidx.npy", idx)
                s.rgb, s.rgb_index = f"{sid}.png", f"{sid}.rgbidx.npy"
            samples.append(s)
    m = DatasetManifest(args.name, samples, root=out)
    m.save(out / "manifest.json")
    print(f"wrote {len(samples)} samples to {out / 'manifest.json'}")
    return 0


def cmd_selftest(args) -> int:
    from .checks import CHECKS, run_selftest

    names = args.only.split(",") if args.only else None
    if names:
        unknown = set(names) - set(CHECKS)
        if unknown:
            raise CLIError(f"unknown checks {sorted(unknown)}; available: {', '.join(CHECKS)}")
    results = run_selftest(names)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# -- parser ------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config entry")
    p.add_argument("--smoke", action="store_true", help="start from the small smoke configuration")
    p.add_argument("--cache", help=f"cache root (default ${CACHE_ENV} or <out>/cache)")
    p.add_argument("--backend", choices=("toy", "pretrained"))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pointad", description="Zero-shot 3D anomaly detection with learned prompts")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="populate the rendering cache")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int)
    p.add_argument("--lighting", choices=("--", "-", "original", "+", "++"))
    p.add_argument("--size", type=parse_size)
    _common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="learn prompts on an auxiliary class")
    p.add_argument("manifest")
    p.add_argument("--aux-class")
    p.add_argument("--variant", choices=("pointad", "pointad+"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--views", type=int)
    p.add_argument("--size", type=parse_size)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="score point clouds with a trained checkpoint")
    p.add_argument("input", help="manifest (.json) or point cloud (.ply)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("3d", "m3d"), default="3d")
    p.add_argument("--variant", choices=("pointad", "pointad+"))
    p.add_argument("--emit-maps", help="directory for per-view heatmaps and point score files")
    p.add_argument("--out", required=True)
    p.add_argument("--rgb", help="RGB image for a single .ply input")
    p.add_argument("--rgb-index", help="n x 2 .npy pixel index for --rgb")
    p.add_argument("--format", choices=("ply", "organized-grid"), default="ply")
    p.add_argument("--views", type=int)
    p.add_argument("--size", type=parse_size)
    _common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics from a prediction directory")
    p.add_argument("pred_dir")
    p.add_argument("manifests", nargs="+", help="test manifest; source and target for cross-dataset")
    p.add_argument("--protocol", choices=("one-vs-rest", "cross-dataset"), default="one-vs-rest")
    p.add_argument("--fpr-limit", type=float)
    p.add_argument("--aux-class", help="class excluded from one-vs-rest evaluation")
    p.add_argument("--mode", choices=("3d", "m3d"), default="3d")
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("protocol", help="train-or-load per auxiliary class, then evaluate")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--protocol", choices=("one-vs-rest", "cross-dataset"), default="one-vs-rest")
    p.add_argument("--aux-classes", help="comma-separated auxiliary classes")
    p.add_argument("--mode", choices=("3d", "m3d"), default="3d")
    p.add_argument("--variant", choices=("pointad", "pointad+"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--fpr-limit", type=float)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("synth", help="write a synthetic dataset and its manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", default="torus,sphere")
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--points", type=int, default=8000)
    p.add_argument("--anomalies", default="dent,bump,crack")
    p.add_argument("--normal-every", type=int, default=2, help="every n-th sample is anomaly-free")
    p.add_argument("--split", default="test", choices=("train", "test", "aux"))
    p.add_argument("--rgb", type=parse_size, help="also write an aligned front-view RGB of this size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("selftest", help="run the oracle and invariant checks")
    p.add_argument("--only", help="comma-separated subset of checks")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ConfigKeyError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"pointad {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Prompt optimization against frozen, cached visual features."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import RunConfig
from .data.io import DatasetManifest
from .encoder import make_backbone, similarity_softmax
from .losses import (
    TERMS,
    loss_cross,
    loss_e3d_local,
    loss_i2d_global,
    loss_i2d_local,
    loss_i3d_global,
    loss_i3d_local,
    total_loss,
)
from .pipeline import PreparedSample, prepare_many
from .point_repr import upsample_seg
from .prompts import PromptSet, init_prompts, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def sample_losses(s: PreparedSample, g: torch.Tensor, tau: float, variant: str = "pointad+") -> dict:
    """All loss terms for one point cloud given the 4 x d text embeddings."""
    g_r, g_g = g[0:2], g[2:4]
    view_probs = similarity_softmax(g_r, s.glob, tau)
    seg = similarity_softmax(g_r, s.local, tau)
    seg2d = upsample_seg(seg, tuple(s.masks.shape[1:]))
    s3d = s.corr.gather_maps(seg2d)
    parts = {
        "i3d_global": loss_i3d_global(view_probs, s.cloud_label),
        "i3d_local": loss_i3d_local(s3d[:, 0], s3d[:, 1], s.y3d),
        "i2d_global": loss_i2d_global(view_probs, s.view_labels),
        "i2d_local": loss_i2d_local(seg2d, s.masks),
    }
    if variant == "pointad+":
        t = similarity_softmax(g_g, s.q_hat, tau)
        parts["e3d_local"] = loss_e3d_local(t[:, 0], t[:, 1], s.y3d)
        parts["cross"] = loss_cross(g[0], g[1], g[2], g[3])
    else:
        parts["e3d_local"] = torch.zeros((), dtype=g.dtype)
        parts["cross"] = torch.zeros((), dtype=g.dtype)
    return parts


def batch_objective(samples, backbone, prompts: PromptSet, learnable, variant: str,
                    weights: Optional[dict] = None):
    """Per-term mean over the batch, then the weighted total."""
    g = backbone.encode_prompts(prompts, learnable)
    tau = backbone.cfg.temperature
    per = [sample_losses(s, g, tau, variant) for s in samples]
    parts = {k: torch.stack([p[k] for p in per]).mean() for k in TERMS}
    return total_loss(parts, weights)


@dataclass
class TrainResult:
    prompts: PromptSet
    log: list = field(default_factory=list)
    backbone_checksum: str = ""
    checkpoints: list = field(default_factory=list)

    def epoch_means(self) -> list[float]:
        by = {}
        for rec in self.log:
            by.setdefault(rec["epoch"], []).append(rec["total"])
        return [float(np.mean(by[e])) for e in sorted(by)]


def _adam_state(opt, param):
    st = opt.state.get(param, {})
    if not st:
        return {}
    return {"adam_exp_avg": st["exp_avg"].detach().numpy(),
            "adam_exp_avg_sq": st["exp_avg_sq"].detach().numpy(),
            "adam_step": np.array([float(st["step"])])}


def train_prepared(samples: list[PreparedSample], backbone, cfg: RunConfig,
                   out_dir=None, resume=None, log_path=None) -> TrainResult:
    """Adam on the prompt embeddings only; the backbone checksum must not move."""
    tc = cfg.train
    if not samples:
        raise TrainingError("empty auxiliary split")
    before = backbone.checksum()
    pc_cfg = cfg.prompts
    start_epoch = 0
    adam = {}
    if resume is not None:
        prompts, adam, info = load_checkpoint(
            resume, {"backbone_id": backbone.backbone_id, "E": pc_cfg.length, "mode": pc_cfg.mode})
        start_epoch = int(info.get("epoch", -1)) + 1
    else:
        prompts = init_prompts(pc_cfg.mode, pc_cfg.length, tc.seed,
                               pc_cfg.class_name or tc.aux_class or None,
                               d_word=backbone.cfg.d_word, backbone_id=backbone.backbone_id,
                               std=pc_cfg.init_std)
    param = torch.nn.Parameter(torch.as_tensor(np.array(prompts.learnable), dtype=torch.float64))
    opt = torch.optim.Adam([param], lr=tc.lr, betas=tc.betas)
    if adam:
        opt.state[param] = {
            "step": torch.tensor(float(adam["adam_step"][0])),
            "exp_avg": torch.as_tensor(adam["adam_exp_avg"]).clone(),
            "exp_avg_sq": torch.as_tensor(adam["adam_exp_avg_sq"]).clone(),
        }

    result = TrainResult(prompts=prompts, backbone_checksum=before)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    logf = open(log_path, "a") if log_path is not None else None
    step = 0
    try:
        for epoch in range(start_epoch, tc.epochs):
            order = np.random.default_rng([tc.seed, epoch]).permutation(len(samples))
            for b in range(0, len(order), tc.batch_size):
                batch = [samples[i] for i in order[b:b + tc.batch_size]]
                total, report = batch_objective(batch, backbone, prompts, param, tc.variant, tc.weights)
                rec = report.to_dict()
                for term, value in rec.items():
                    if not math.isfinite(value):
                        raise TrainingError(f"non-finite loss in term {term!r} at epoch {epoch}")
                opt.zero_grad()
                total.backward()
                opt.step()
                rec.update(epoch=epoch, step=step)
                result.log.append(rec)
                if logf is not None:
                    logf.write(json.dumps(rec, sort_keys=True) + "\n")
                    logf.flush()
                step += 1
            prompts.learnable = param.detach().numpy().copy()
            if out_dir is not None:
                info = {"epoch": epoch, "config": cfg.fingerprint(), "variant": tc.variant}
                for name in (f"epoch_{epoch:03d}.ckpt", "last.ckpt"):
                    save_checkpoint(out_dir / name, prompts, _adam_state(opt, param), info)
                result.checkpoints.append(str(out_dir / f"epoch_{epoch:03d}.ckpt"))
            log.info("epoch %d mean total %.4f", epoch,
                     np.mean([r["total"] for r in result.log if r["epoch"] == epoch]))
    finally:
        if logf is not None:
            logf.close()
    prompts.learnable = param.detach().numpy().copy()
    if backbone.checksum() != before:
        raise TrainingError("backbone parameters changed during training")
    return result


def aux_samples(manifest: DatasetManifest, aux_class: str):
    chosen = manifest.select(aux_class, splits=("aux",)) or manifest.select(aux_class, splits=("test",))
    if not chosen:
        raise TrainingError(f"no auxiliary samples for class {aux_class!r}")
    return [manifest.load(s) for s in chosen]


def train(manifest: DatasetManifest, cfg: RunConfig, out_dir=None, resume=None, log_path=None,
          backbone=None) -> TrainResult:
    backbone = backbone or make_backbone(cfg.encoder)
    pcs = aux_samples(manifest, cfg.train.aux_class)
    for pc in pcs:
        if pc.labels is None:
            raise TrainingError(f"auxiliary sample {pc.sample_id} has no labels")
    samples = prepare_many(pcs, backbone, cfg)
    return train_prepared(samples, backbone, cfg, out_dir, resume, log_path)


@dataclass
class GradCheckReport:
    max_rel_error: float
    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(samples, backbone, prompts: PromptSet, variant: str = "pointad+", n_coords: int = 64,
               step: float = 1e-6, seed: int = 0, atol: float = 1e-8) -> GradCheckReport:
    """Analytic vs central-difference gradient of the total loss on random prompt coordinates."""
    base = torch.as_tensor(np.array(prompts.learnable), dtype=torch.float64)
    param = base.clone().requires_grad_(True)
    total, _ = batch_objective(samples, backbone, prompts, param, variant)
    (grad,) = torch.autograd.grad(total, param)
    grad = grad.numpy().ravel()
    coords = np.random.default_rng(seed).choice(base.numel(), size=n_coords, replace=False)
    numeric = np.empty(n_coords)
    flat = base.clone().reshape(-1)
    with torch.no_grad():
        for i, c in enumerate(coords):
            vals = []
            for sgn in (1.0, -1.0):
                x = flat.clone()
                x[c] += sgn * step
                v, _ = batch_objective(samples, backbone, prompts, x.reshape(base.shape), variant)
                vals.append(float(v))
            numeric[i] = (vals[0] - vals[1]) / (2 * step)
    analytic = grad[coords]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(float(rel.max()), coords, analytic, numeric)

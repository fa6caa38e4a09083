"""Prompt optimization: gating, determinism, resume and gradient checks."""

import json

import numpy as np
import pytest
import torch

import pointad.trainer as trainer_mod
from pointad.config import TrainConfig
from pointad.data import generate_synthetic_sample, save_point_cloud
from pointad.data.io import DatasetManifest, Sample
from pointad.prompts import load_checkpoint
from pointad.trainer import TrainingError, grad_check, train, train_prepared

from conftest import small_config


def test_train_defaults():
    tc = TrainConfig()
    assert (tc.epochs, tc.batch_size, tc.lr) == (15, 4, 1e-3)
    with pytest.raises(ValueError):
        TrainConfig(variant="other")


def test_pointad_variant_zeroes_geometry_terms(small_samples, small_backbone):
    cfg = small_config(**{"train.epochs": 2, "train.variant": "pointad"})
    res = train_prepared(small_samples, small_backbone, cfg)
    assert len(res.log) == 2
    assert all(r["e3d_local"] == 0.0 and r["cross"] == 0.0 for r in res.log)
    full = train_prepared(small_samples, small_backbone, small_config(**{"train.epochs": 1}))
    assert full.log[0]["e3d_local"] > 0 and full.log[0]["cross"] > 0


def test_backbone_frozen_and_suffixes_untouched(small_samples, small_backbone):
    before = small_backbone.checksum()
    res = train_prepared(small_samples[:2], small_backbone, small_config(**{"train.epochs": 2}))
    assert small_backbone.checksum() == before == res.backbone_checksum
    assert res.prompts.suffixes == (("object",), ("damaged", "object"), ("point", "cloud"),
                                    ("damaged", "point", "cloud"))
    init = trainer_mod.init_prompts(E=12, d_word=small_backbone.cfg.d_word)
    assert not np.array_equal(res.prompts.learnable, init.learnable)


def test_training_is_deterministic(small_samples, small_backbone):
    cfg = small_config(**{"train.epochs": 2})
    a = train_prepared(small_samples, small_backbone, cfg)
    b = train_prepared(small_samples, small_backbone, cfg)
    assert a.prompts.learnable.tobytes() == b.prompts.learnable.tobytes()
    assert a.log == b.log


def test_resume_restores_exact_state(tmp_path, small_samples, small_backbone):
    samples = small_samples[:3]
    cfg4 = small_config(**{"train.epochs": 4, "train.batch_size": 2})
    full = train_prepared(samples, small_backbone, cfg4, out_dir=tmp_path / "full")
    cfg2 = small_config(**{"train.epochs": 2, "train.batch_size": 2})
    train_prepared(samples, small_backbone, cfg2, out_dir=tmp_path / "half")
    rest = train_prepared(samples, small_backbone, cfg4, out_dir=tmp_path / "half",
                          resume=tmp_path / "half" / "last.ckpt")
    assert rest.prompts.learnable.tobytes() == full.prompts.learnable.tobytes()
    assert [r["total"] for r in rest.log] == [r["total"] for r in full.log if r["epoch"] >= 2]
    a = (tmp_path / "full" / "last.ckpt").read_bytes()
    b = (tmp_path / "half" / "last.ckpt").read_bytes()
    assert a == b


def test_checkpoints_and_log(tmp_path, small_samples, small_backbone):
    cfg = small_config(**{"train.epochs": 2})
    res = train_prepared(small_samples, small_backbone, cfg, out_dir=tmp_path, log_path=tmp_path / "log.jsonl")
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["epoch_000.ckpt", "epoch_001.ckpt", "last.ckpt"]
    ps, extras, info = load_checkpoint(tmp_path / "last.ckpt", {"backbone_id": small_backbone.backbone_id})
    assert info["epoch"] == 1 and info["variant"] == "pointad+" and info["config"] == cfg.fingerprint()
    assert {"adam_exp_avg", "adam_exp_avg_sq", "adam_step"} <= set(extras)
    np.testing.assert_array_equal(ps.learnable, res.prompts.learnable)
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == res.log and res.epoch_means()[0] == lines[0]["total"]


def test_non_finite_term_is_named(monkeypatch, small_samples, small_backbone):
    monkeypatch.setattr(trainer_mod, "loss_cross", lambda *g: torch.tensor(float("nan"), dtype=torch.float64))
    with pytest.raises(TrainingError, match="cross"):
        train_prepared(small_samples[:1], small_backbone, small_config(**{"train.epochs": 1}))


def test_empty_split_rejected(small_backbone, small_cfg):
    with pytest.raises(TrainingError):
        train_prepared([], small_backbone, small_cfg)


def test_train_from_manifest(tmp_path, small_backbone):
    samples = []
    for i, a in enumerate(("dent", "none")):
        pc = generate_synthetic_sample("box", a, 600, seed=i)
        save_point_cloud(tmp_path / f"b{i}.ply", pc)
        samples.append(Sample(f"b{i}.ply", "box", "aux", sample_id=f"b{i}"))
    m = DatasetManifest("toy", samples, root=tmp_path)
    cfg = small_config(**{"train.epochs": 1, "train.aux_class": "box"})
    res = train(m, cfg, backbone=small_backbone)
    assert len(res.log) == 1
    with pytest.raises(TrainingError, match="no auxiliary samples"):
        train(m, small_config(**{"train.aux_class": "cup"}), backbone=small_backbone)


def test_grad_check_full_pipeline(small_samples, small_backbone, small_prompts):
    rep = grad_check(small_samples[:2], small_backbone, small_prompts, "pointad+", n_coords=64)
    assert rep.coords.size == 64 and rep.max_rel_error <= 1e-4


def test_grad_check_zero_gradient_coordinates(small_samples, small_backbone, small_prompts):
    """Geometry prompts get no gradient in the pointad variant; the absolute guard handles them."""
    E, dw = small_prompts.learnable.shape[1:]
    rep = grad_check(small_samples[:1], small_backbone, small_prompts, "pointad", n_coords=200, seed=3)
    geometry = rep.coords >= 2 * E * dw
    assert geometry.any()
    np.testing.assert_array_equal(rep.analytic[geometry], 0.0)
    assert rep.max_rel_error <= 1e-4


def test_linear_text_map_gradient(small_backbone, small_prompts):
    """A linear functional of the text embeddings has an exact finite difference."""
    c = torch.as_tensor(np.random.default_rng(0).normal(size=(4, small_backbone.cfg.dim)))
    x = torch.tensor(small_prompts.learnable, requires_grad=True)
    f = lambda v: (small_backbone.encode_prompts(small_prompts, v) * c).sum()
    (grad,) = torch.autograd.grad(f(x), x)
    rng = np.random.default_rng(1)
    worst = 0.0
    for flat in rng.choice(x.numel(), 64, replace=False):
        idx = np.unravel_index(flat, x.shape)
        xp, xm = small_prompts.learnable.copy(), small_prompts.learnable.copy()
        xp[idx] += 1e-3
        xm[idx] -= 1e-3
        num = (float(f(torch.as_tensor(xp))) - float(f(torch.as_tensor(xm)))) / 2e-3
        worst = max(worst, abs(num - float(grad[idx])) / max(abs(num), abs(float(grad[idx])), 1e-8))
    assert worst <= 1e-6

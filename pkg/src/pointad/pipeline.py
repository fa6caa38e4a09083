"""Render -> encode -> correspond -> aggregate, shared by training and inference."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data.types import PointCloud
from .encoder import FeatureBundle, cache_features
from .point_repr import Correspondence, ExplicitPointRep, correspondence, g_aggregate
from .renderer import ViewBundle, render_bundle


@dataclass
class PreparedSample:
    pc: PointCloud
    bundle: ViewBundle
    features: FeatureBundle
    corr: Correspondence
    explicit: ExplicitPointRep
    local: torch.Tensor        # K x h x w x d
    glob: torch.Tensor         # K x d
    q_hat: torch.Tensor        # n x d
    masks: torch.Tensor        # K x H x W dense 2D labels
    y3d: torch.Tensor          # n
    view_labels: torch.Tensor  # K
    cloud_label: int


def cache_dirs(cfg: RunConfig, cache_dir=None):
    root = cache_dir if cache_dir is not None else cfg.cache_dir
    if root is None:
        return None, None
    root = Path(root)
    return root / "renders", root / "features"


def prepare_sample(pc: PointCloud, backbone, cfg: RunConfig, cache_dir=None) -> PreparedSample:
    render_dir, feat_dir = cache_dirs(cfg, cache_dir)
    bundle = render_bundle(pc, cfg.views, cfg.render, cache_dir=render_dir)
    features = cache_features(bundle, backbone, cache_dir=feat_dir)
    agg = cfg.aggregation
    corr = correspondence(bundle, pc.points, agg.k)
    explicit = g_aggregate(features, bundle, pc.points, agg.k, agg.alpha, agg.sigma, corr=corr)
    masks = bundle.label_images().astype(np.float64)
    labels = pc.labels if pc.labels is not None else np.zeros(pc.n, dtype=np.int64)
    return PreparedSample(
        pc=pc,
        bundle=bundle,
        features=features,
        corr=corr,
        explicit=explicit,
        local=torch.as_tensor(features.local_maps, dtype=torch.float64),
        glob=torch.as_tensor(features.global_feats, dtype=torch.float64),
        q_hat=torch.as_tensor(explicit.q_hat, dtype=torch.float64),
        masks=torch.as_tensor(masks),
        y3d=torch.as_tensor(labels, dtype=torch.float64),
        view_labels=torch.as_tensor(masks.reshape(masks.shape[0], -1).max(axis=1), dtype=torch.long),
        cloud_label=int(labels.max()),
    )


def prepare_many(pcs, backbone, cfg: RunConfig, cache_dir=None) -> list[PreparedSample]:
    return [prepare_sample(pc, backbone, cfg, cache_dir) for pc in pcs]

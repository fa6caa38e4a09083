"""The end-to-end smoke experiment: train prompts on one synthetic shape, test on another."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig, smoke_config
from .data.synthetic import generate_synthetic_sample
from .encoder import make_backbone, text_embeddings
from .inference import ScoreResult, score_3d
from .metrics import aupro, auroc, average_precision
from .pipeline import PreparedSample, prepare_many
from .trainer import TrainResult, train_prepared

TRAIN_ANOMALIES = ("dent", "bump", "crack", "dent", "bump")


@dataclass(frozen=True)
class SmokeSetup:
    aux_class: str = "torus"
    test_class: str = "sphere"
    n_train: int = 20
    n_test: int = 20
    n_points: int = 8000
    seed: int = 0
    overrides: tuple = ()

    def config(self) -> RunConfig:
        return smoke_config({"train.seed": self.seed, "train.aux_class": self.aux_class,
                             **dict(self.overrides)})


def smoke_clouds(setup: SmokeSetup):
    """Training clouds (every fourth one normal) and test clouds (every second one normal)."""
    train = [generate_synthetic_sample(
        setup.aux_class, TRAIN_ANOMALIES[i % 5] if i % 4 else "none", setup.n_points, seed=i)
        for i in range(setup.n_train)]
    test = [generate_synthetic_sample(
        setup.test_class, TRAIN_ANOMALIES[i % 5] if i % 2 else "none", setup.n_points, seed=100 + i)
        for i in range(setup.n_test)]
    return train, test


@dataclass
class SmokeOutcome:
    setup: SmokeSetup
    train: TrainResult
    scores: list[ScoreResult]
    labels: list[np.ndarray]
    metrics: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    @property
    def epoch_means(self) -> list[float]:
        return self.train.epoch_means()

    @property
    def loss_drop(self) -> float:
        m = self.epoch_means
        return 1.0 - m[-1] / m[0]


def evaluate_outcome(scores: list[ScoreResult], labels: list[np.ndarray], points: list[np.ndarray]) -> dict:
    cloud = [int(y.max()) for y in labels]
    glob = [s.global_score for s in scores]
    pooled, pooled_y = np.concatenate([s.point_map for s in scores]), np.concatenate(labels)
    anomalous = [i for i, y in enumerate(labels) if y.any()]
    return {
        "i_auroc": auroc(glob, cloud),
        "ap": average_precision(glob, cloud),
        "p_auroc": auroc(pooled, pooled_y),
        "aupro": aupro([scores[i].point_map for i in range(len(scores))], labels,
                       points=points, fpr_limit=0.3) if anomalous else None,
    }


def score_prepared(test_s: list[PreparedSample], prompts, backbone, cfg: RunConfig,
                   mode: Optional[str] = None):
    """Score prepared test clouds with trained prompts; returns (scores, labels, metrics)."""
    text = text_embeddings(backbone, prompts)
    mode = mode or cfg.train.variant
    scores = [score_3d(s.pc, s.bundle, s.features, text, mode, cfg, s.corr, s.explicit) for s in test_s]
    labels = [s.pc.labels for s in test_s]
    return scores, labels, evaluate_outcome(scores, labels, [s.pc.points for s in test_s])


def run_smoke(setup: SmokeSetup = SmokeSetup(), out_dir=None, backbone=None,
              mode: Optional[str] = None) -> SmokeOutcome:
    """Prepare, train and score; checkpoints go to ``out_dir`` when given."""
    cfg = setup.config()
    backbone = backbone or make_backbone(cfg.encoder)
    t0 = time.perf_counter()
    train_pcs, test_pcs = smoke_clouds(setup)
    train_s = prepare_many(train_pcs, backbone, cfg)
    test_s = prepare_many(test_pcs, backbone, cfg)
    t1 = time.perf_counter()
    res = train_prepared(train_s, backbone, cfg, out_dir=Path(out_dir) if out_dir else None)
    t2 = time.perf_counter()
    scores, labels, metrics = score_prepared(test_s, res.prompts, backbone, cfg, mode)
    t3 = time.perf_counter()
    return SmokeOutcome(setup, res, scores, labels, metrics,
                        {"prepare": t1 - t0, "train": t2 - t1, "score": t3 - t2, "total": t3 - t0})

"""Loss terms of hierarchical representation learning (torch; numpy inputs accepted)."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import torch
import torch.nn.functional as F

from ._tensor import to_tensor

DICE_EPS = 1e-6
PROB_CLAMP = 1e-7
FOCAL_GAMMA = 2.0
CROSS_TAU = 0.07

TERMS = ("i3d_global", "i3d_local", "i2d_global", "i2d_local", "e3d_local", "cross")


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)


def dice_loss(pred, target, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps) over all elements."""
    p, t = to_tensor(pred), to_tensor(target).to(to_tensor(pred).dtype)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(t.shape)}")
    return 1.0 - (2.0 * (p * t).sum() + eps) / (p.sum() + t.sum() + eps)


def focal_loss(pred_pair, target, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Mean of -(1 - p_t)^gamma log p_t; ``pred_pair[..., 0]`` normal, ``[..., 1]`` abnormal."""
    p, t = to_tensor(pred_pair), to_tensor(target)
    p_t = torch.where(t.bool(), p[..., 1], p[..., 0])
    p_t = _clamp(p_t)
    return (-((1.0 - p_t) ** gamma) * torch.log(p_t)).mean()


def cross_entropy(prob_pair, label) -> torch.Tensor:
    p = to_tensor(prob_pair)
    return -torch.log(_clamp(p[..., int(label)]))


def loss_i3d_global(view_probs, cloud_label) -> torch.Tensor:
    """CE of the view-averaged class probabilities against the cloud label."""
    return cross_entropy(to_tensor(view_probs).mean(dim=0), cloud_label)


def loss_i3d_local(s_normal, s_abnormal, y) -> torch.Tensor:
    y = to_tensor(y)
    return dice_loss(s_normal, 1.0 - y) + dice_loss(s_abnormal, y)


def loss_i2d_global(view_probs, view_labels) -> torch.Tensor:
    p = _clamp(to_tensor(view_probs))
    lab = torch.as_tensor(to_tensor(view_labels), dtype=torch.long)
    return -torch.log(p[torch.arange(p.shape[0]), lab]).mean()


def loss_i2d_local(seg2d, masks) -> torch.Tensor:
    """Per-view Focal + two Dice terms on K x H x W x 2 maps, averaged over views."""
    s, y = to_tensor(seg2d), to_tensor(masks).to(to_tensor(seg2d).dtype)
    terms = [
        focal_loss(s[k], y[k]) + dice_loss(s[k, ..., 0], 1.0 - y[k]) + dice_loss(s[k, ..., 1], y[k])
        for k in range(s.shape[0])
    ]
    return torch.stack(terms).mean()


def loss_e3d_local(t_normal, t_abnormal, y) -> torch.Tensor:
    return loss_i3d_local(t_normal, t_abnormal, y)


def _cos(a, b):
    return F.cosine_similarity(a, b, dim=-1)


def loss_cross(g_rn, g_ra, g_gn, g_ga, tau: float = CROSS_TAU) -> torch.Tensor:
    """Symmetric two-way contrastive alignment of same-semantics prompts across layers.

    Each anchor prefers its same-semantics counterpart on the other layer over
    the opposite-semantics one: ``-log softmax`` over the pair (pos, neg) of
    cosines divided by ``tau``.
    """
    g_rn, g_ra, g_gn, g_ga = (to_tensor(x) for x in (g_rn, g_ra, g_gn, g_ga))
    pairs = [
        (_cos(g_ga, g_ra), _cos(g_ga, g_rn)),
        (_cos(g_gn, g_rn), _cos(g_gn, g_ra)),
        (_cos(g_ra, g_ga), _cos(g_ra, g_gn)),
        (_cos(g_rn, g_gn), _cos(g_rn, g_ga)),
    ]
    return sum(F.softplus((neg - pos) / tau) for pos, neg in pairs)


@dataclass
class LossReport:
    i3d_global: float = 0.0
    i3d_local: float = 0.0
    i2d_global: float = 0.0
    i2d_local: float = 0.0
    e3d_local: float = 0.0
    cross: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def total_loss(parts: dict, weights: Optional[dict] = None):
    """Weighted sum of the loss terms; returns ``(total, LossReport)``.

    Missing terms count as zero. The report keeps the unweighted terms.
    """
    weights = weights or {}
    unknown = set(parts) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    total = sum(weights.get(k, 1.0) * to_tensor(v) for k, v in parts.items()) if parts else torch.zeros(())
    total = to_tensor(total)
    report = LossReport(**{k: float(to_tensor(v).detach()) for k, v in parts.items()},
                        total=float(total.detach()))
    return total, report

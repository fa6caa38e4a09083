"""Detection and segmentation metrics plus the one-vs-rest / cross-dataset protocols."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.stats import rankdata

log = logging.getLogger(__name__)

METRICS = ("i_auroc", "ap", "p_auroc", "aupro")
PROTOCOLS = ("one-vs-rest", "cross-dataset")


class UndefinedMetricError(ValueError):
    pass


def _binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Normalized Mann-Whitney U; tied scores count one half."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _tie_groups(s: np.ndarray):
    """Descending order and the last index of every run of equal scores."""
    order = np.argsort(-s, kind="stable")
    ss = s[order]
    ends = np.flatnonzero(np.r_[ss[1:] != ss[:-1], True])
    return order, ends


def average_precision(scores, labels) -> float:
    """Sum over distinct thresholds of (recall increase) x precision."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order, ends = _tie_groups(s)
    tp = np.cumsum(y[order])[ends]
    k = ends + 1
    recall = tp / n_pos
    precision = tp / k
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def region_components(points: np.ndarray, labels: np.ndarray, k: int = 8) -> np.ndarray:
    """Region id per point: connected anomalous points on the kNN graph, -1 for normal points.

    Two anomalous points are adjacent when either is among the other's k nearest
    neighbors in the full cloud, so normal points separate regions.
    """
    points = np.asarray(points, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    out = np.full(y.size, -1, dtype=np.int64)
    anom = np.flatnonzero(y)
    if anom.size == 0:
        return out
    kk = min(k + 1, points.shape[0])
    _, nbr = cKDTree(points).query(points[anom], k=kk)
    nbr = np.asarray(nbr).reshape(anom.size, kk)
    pos = np.full(y.size, -1, dtype=np.int64)
    pos[anom] = np.arange(anom.size)
    src = np.repeat(np.arange(anom.size), kk)
    dst = pos[nbr.ravel()]
    keep = dst >= 0
    g = coo_matrix((np.ones(keep.sum()), (src[keep], dst[keep])), shape=(anom.size, anom.size))
    _, comp = connected_components(g, directed=True, connection="weak")
    out[anom] = comp
    return out


def pro_curve(scores: Sequence[np.ndarray], regions: Sequence[np.ndarray]):
    """(FPR, PRO) at every distinct threshold, from (0, 0) to (1, 1).

    ``regions`` holds per-sample region ids (-1 normal); ids are local to each
    sample. PRO is the mean over all regions of the fraction of the region
    scored at or above the threshold.
    """
    s_all, w_all, neg_all = [], [], []
    n_regions = 0
    for s, r in zip(scores, regions):
        s = np.asarray(s, dtype=np.float64).ravel()
        r = np.asarray(r).ravel()
        if s.shape != r.shape:
            raise ValueError("scores and regions differ in length")
        w = np.zeros(s.size)
        ids, inv, counts = np.unique(r[r >= 0], return_inverse=True, return_counts=True)
        w[r >= 0] = 1.0 / counts[inv]
        n_regions += ids.size
        s_all.append(s)
        w_all.append(w)
        neg_all.append(r < 0)
    s, w, neg = np.concatenate(s_all), np.concatenate(w_all), np.concatenate(neg_all)
    if n_regions == 0:
        raise UndefinedMetricError("AUPRO needs at least one anomalous region")
    n_neg = int(neg.sum())
    if n_neg == 0:
        raise UndefinedMetricError("AUPRO needs normal points")
    order, ends = _tie_groups(s)
    fpr = np.cumsum(neg[order])[ends] / n_neg
    pro = np.cumsum(w[order])[ends] / n_regions
    return np.r_[0.0, fpr], np.r_[0.0, pro]


def aupro(scores, labels=None, regions=None, fpr_limit: float = 0.3, points=None, k: int = 8) -> float:
    """Area under PRO vs FPR on [0, fpr_limit], divided by fpr_limit.

    ``scores`` is one array or a list of per-sample arrays. Regions come from
    ``regions`` or, given ``points`` and ``labels``, from ``region_components``.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError("fpr_limit must be in (0, 1]")
    single = isinstance(scores, np.ndarray) and scores.ndim == 1
    as_list = lambda x: [x] if single else list(x)
    scores = as_list(scores)
    if regions is None:
        if labels is None:
            raise ValueError("need labels or regions")
        labels = as_list(labels)
        if points is None:
            regions = [np.where(np.asarray(l) > 0, 0, -1) for l in labels]
        else:
            regions = [region_components(p, l, k) for p, l in zip(as_list(points), labels)]
    else:
        regions = as_list(regions)
    fpr, pro = pro_curve(scores, regions)
    # keep the last point of every FPR plateau so vertical jumps integrate to zero width
    cut = np.searchsorted(fpr, fpr_limit, side="right")
    x, y = fpr[:cut], pro[:cut]
    if x[-1] < fpr_limit:
        x1, y1 = fpr[cut], pro[cut]
        y_lim = y[-1] + (y1 - y[-1]) * (fpr_limit - x[-1]) / (x1 - x[-1])
        x, y = np.r_[x, fpr_limit], np.r_[y, y_lim]
    return float(np.trapezoid(y, x) / fpr_limit)


@dataclass
class SampleScores:
    sample_id: str
    class_name: str
    global_score: float
    cloud_label: int
    point_map: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    regions: Optional[np.ndarray] = None


def _safe(fn, *a, **kw) -> Optional[float]:
    try:
        return fn(*a, **kw)
    except UndefinedMetricError as exc:
        log.info("metric undefined: %s", exc)
        return None


def evaluate_scores(samples: Sequence[SampleScores], fpr_limit: float = 0.3) -> dict:
    """I-AUROC and AP on global scores; P-AUROC and AUPRO on pooled point maps."""
    out = {
        "i_auroc": _safe(auroc, [s.global_score for s in samples], [s.cloud_label for s in samples]),
        "ap": _safe(average_precision, [s.global_score for s in samples], [s.cloud_label for s in samples]),
        "p_auroc": None,
        "aupro": None,
        "n": len(samples),
    }
    seg = [s for s in samples if s.point_map is not None and s.labels is not None]
    if seg:
        out["p_auroc"] = _safe(auroc, np.concatenate([s.point_map for s in seg]),
                               np.concatenate([s.labels for s in seg]))
        with_regions = [s for s in seg if s.regions is not None]
        if with_regions:
            out["aupro"] = _safe(aupro, [s.point_map for s in with_regions],
                                 regions=[s.regions for s in with_regions], fpr_limit=fpr_limit)
    return out


@dataclass
class EvalResult:
    per_class: dict
    protocol: str = "one-vs-rest"
    modality: str = "3d"
    aux_classes: list = field(default_factory=list)
    fpr_limit: float = 0.3
    missing: list = field(default_factory=list)

    def mean(self, metric: str) -> Optional[float]:
        vals = [v[metric] for v in self.per_class.values() if v.get(metric) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def i_auroc(self):
        return self.mean("i_auroc")

    @property
    def ap(self):
        return self.mean("ap")

    @property
    def p_auroc(self):
        return self.mean("p_auroc")

    @property
    def aupro(self):
        return self.mean("aupro")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"] = {m: self.mean(m) for m in METRICS}
        return d

    def table(self) -> str:
        """Classes as rows; (I-AUROC, AP) and (P-AUROC, AUPRO) pairs in percent, '-' when missing."""
        fmt = lambda v: "-" if v is None else f"{100 * v:.1f}"
        rows = [(c, m) for c, m in sorted(self.per_class.items())]
        rows.append(("mean", {m: self.mean(m) for m in METRICS}))
        width = max(8, *(len(c) for c, _ in rows))
        lines = [f"protocol={self.protocol} modality={self.modality} aux={','.join(self.aux_classes)} "
                 f"fpr_limit={self.fpr_limit}",
                 f"{'class':<{width}}  {'(I-AUROC, AP)':>16}  {'(P-AUROC, AUPRO)':>18}"]
        for c, m in rows:
            a = f"({fmt(m.get('i_auroc'))}, {fmt(m.get('ap'))})"
            b = f"({fmt(m.get('p_auroc'))}, {fmt(m.get('aupro'))})"
            lines.append(f"{c:<{width}}  {a:>16}  {b:>18}")
        if self.missing:
            lines.append(f"missing predictions ({len(self.missing)}): {', '.join(self.missing)}")
        return "\n".join(lines)

    def save(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / "results.json", out_dir / "results.txt"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        paths[1].write_text(self.table() + "\n")
        return paths


def average_results(results: Sequence[EvalResult]) -> EvalResult:
    """Per-class metrics averaged over several auxiliary-class runs."""
    classes = sorted({c for r in results for c in r.per_class})
    per = {}
    for c in classes:
        per[c] = {}
        for m in METRICS:
            vals = [r.per_class[c][m] for r in results if c in r.per_class and r.per_class[c].get(m) is not None]
            per[c][m] = float(np.mean(vals)) if vals else None
    first = results[0]
    return EvalResult(per, first.protocol, first.modality,
                      [a for r in results for a in r.aux_classes], first.fpr_limit,
                      sorted({m for r in results for m in r.missing}))


def sample_scores_from(pc, res, region_k: int = 8, modality: str = "3d") -> SampleScores:
    pmap, gscore = res.point_map, res.global_score
    if modality == "m3d":
        pmap, gscore = res.fused_map, res.fused_score
    labels = pc.labels
    regions = region_components(pc.points, labels, region_k) if labels is not None else None
    return SampleScores(pc.sample_id, pc.class_name, float(gscore),
                        int(labels.max()) if labels is not None else 0, pmap, labels, regions)


def evaluate_predictions(pred_dir, manifest, classes=None, fpr_limit: float = 0.3, region_k: int = 8,
                         modality: str = "3d", protocol: str = "one-vs-rest", aux_classes=()) -> EvalResult:
    """Metrics from score files written by ``inference.write_scores``; absent files are listed."""
    from .inference import read_scores

    pred_dir = Path(pred_dir)
    by_class: dict[str, list] = {}
    missing = []
    for s in manifest.select(splits=("test",)):
        if classes is not None and s.class_name not in classes:
            continue
        if not (pred_dir / f"{s.sample_id}.json").exists():
            missing.append(s.sample_id)
            continue
        pmap, meta = read_scores(pred_dir, s.sample_id)
        gscore = meta["global_score"]
        if modality == "m3d":
            if "fused_map" not in meta:
                missing.append(s.sample_id)
                continue
            pmap, gscore = meta["fused_map"], meta["fused_score"]
        pc = manifest.load(s)
        regions = region_components(pc.points, pc.labels, region_k) if pc.labels is not None else None
        by_class.setdefault(s.class_name, []).append(SampleScores(
            s.sample_id, s.class_name, float(gscore),
            int(pc.labels.max()) if pc.labels is not None else 0,
            pmap if pc.labels is not None else None, pc.labels, regions))
    per = {c: evaluate_scores(v, fpr_limit) for c, v in by_class.items()}
    return EvalResult(per, protocol, modality, list(aux_classes), fpr_limit, missing)


def run_protocol(manifests, cfg, protocol: str = "one-vs-rest", aux_classes: Sequence[str] = (),
                 checkpoint_dir=None, modality: str = "3d", backbone=None, cache_dir=None) -> EvalResult:
    """Train (or load) prompts per auxiliary class and evaluate the held-out classes.

    one-vs-rest: ``manifests`` is one manifest; every other class is tested.
    cross-dataset: ``manifests`` is (source, target); all target classes are tested.
    Results are averaged over the auxiliary classes.
    """
    from .encoder import make_backbone, text_embeddings
    from .inference import score_cloud
    from .prompts import load_checkpoint
    from .trainer import train

    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if isinstance(manifests, (list, tuple)):
        source = manifests[0]
        target = manifests[1] if protocol == "cross-dataset" else manifests[0]
        if protocol == "cross-dataset" and len(manifests) != 2:
            raise ValueError("cross-dataset needs exactly two manifests")
    else:
        if protocol == "cross-dataset":
            raise ValueError("cross-dataset needs two manifests")
        source = target = manifests
    aux_classes = list(aux_classes) or [cfg.train.aux_class]
    backbone = backbone or make_backbone(cfg.encoder)
    mode = cfg.train.variant
    results = []
    for aux in aux_classes:
        run_cfg = cfg.override({"train.aux_class": aux})
        ckpt = Path(checkpoint_dir) / aux / "last.ckpt" if checkpoint_dir is not None else None
        if ckpt is not None and ckpt.exists():
            prompts, _, _ = load_checkpoint(ckpt, {"backbone_id": backbone.backbone_id})
        else:
            out = ckpt.parent if ckpt is not None else None
            prompts = train(source, run_cfg, out_dir=out, backbone=backbone).prompts
        text = text_embeddings(backbone, prompts)
        tested = [c for c in target.classes() if protocol == "cross-dataset" or c != aux]
        per = {}
        for c in tested:
            scored = []
            for s in target.select(c, splits=("test",)):
                pc = target.load(s)
                res = score_cloud(pc, backbone, text, run_cfg, mode, modality, cache_dir)
                scored.append(sample_scores_from(pc, res, cfg.eval.region_k, modality))
            if scored:
                per[c] = evaluate_scores(scored, cfg.eval.fpr_limit)
        results.append(EvalResult(per, protocol, modality, [aux], cfg.eval.fpr_limit))
    return average_results(results)

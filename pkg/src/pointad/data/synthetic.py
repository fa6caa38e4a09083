"""Desk-scale stand-ins for industrial 3D anomaly data: primitive surfaces with
a single dent, bump, or crack."""

from __future__ import annotations

import numpy as np

from .types import PointCloud, ValidationError

SHAPES = ("sphere", "box", "cylinder", "torus")
ANOMALIES = ("none", "dent", "bump", "crack")

_BOX_HALF = np.array([1.0, 0.75, 0.55])
_CYL_R, _CYL_H = 0.65, 0.85  # radius, half height
_TOR_R, _TOR_r = 0.8, 0.32


def surface_area(shape: str) -> float:
    if shape == "sphere":
        return 4 * np.pi
    if shape == "box":
        a, b, c = 2 * _BOX_HALF
        return 2 * (a * b + b * c + a * c)
    if shape == "cylinder":
        return 2 * np.pi * _CYL_R * 2 * _CYL_H + 2 * np.pi * _CYL_R**2
    if shape == "torus":
        return 4 * np.pi**2 * _TOR_R * _TOR_r
    raise ValidationError(f"unknown shape {shape!r}; expected one of {SHAPES}")


def sample_surface(shape: str, m: int, rng: np.random.Generator):
    """Uniform-by-area surface samples and their outward unit normals."""
    if shape == "sphere":
        p = rng.normal(size=(m, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        return p, p.copy()
    if shape == "box":
        h = _BOX_HALF
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
        axis = rng.choice(3, size=m, p=areas / areas.sum())
        sign = rng.choice([-1.0, 1.0], size=m)
        p = rng.uniform(-1, 1, size=(m, 3)) * h
        p[np.arange(m), axis] = sign * h[axis]
        nrm = np.zeros((m, 3))
        nrm[np.arange(m), axis] = sign
        return p, nrm
    if shape == "cylinder":
        side = 2 * np.pi * _CYL_R * 2 * _CYL_H
        cap = np.pi * _CYL_R**2
        part = rng.choice(3, size=m, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * np.pi, size=m)
        rad = _CYL_R * np.sqrt(rng.uniform(0, 1, size=m))
        z = rng.uniform(-_CYL_H, _CYL_H, size=m)
        on_side = part == 0
        r = np.where(on_side, _CYL_R, rad)
        z = np.where(on_side, z, np.where(part == 1, _CYL_H, -_CYL_H))
        p = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
        nrm = np.zeros((m, 3))
        nrm[on_side, 0] = np.cos(theta[on_side])
        nrm[on_side, 1] = np.sin(theta[on_side])
        nrm[part == 1, 2] = 1.0
        nrm[part == 2, 2] = -1.0
        return p, nrm
    if shape == "torus":
        u = rng.uniform(0, 2 * np.pi, size=m)
        # area element is proportional to R + r cos(v); sample v by rejection
        v = np.empty(m)
        filled = 0
        while filled < m:
            cand = rng.uniform(0, 2 * np.pi, size=2 * (m - filled) + 8)
            acc = rng.uniform(0, _TOR_R + _TOR_r, size=cand.size) < _TOR_R + _TOR_r * np.cos(cand)
            take = cand[acc][: m - filled]
            v[filled:filled + take.size] = take
            filled += take.size
        ring = _TOR_R + _TOR_r * np.cos(v)
        p = np.stack([ring * np.cos(u), ring * np.sin(u), _TOR_r * np.sin(v)], axis=1)
        nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
        return p, nrm
    raise ValidationError(f"unknown shape {shape!r}; expected one of {SHAPES}")


def _tangent(normal: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    t = np.cross(normal, rng.normal(size=3))
    return t / np.linalg.norm(t)


def generate_synthetic_sample(shape: str, anomaly: str = "none", n_points: int = 4000,
                              seed: int = 0) -> PointCloud:
    """Sample ``shape`` and deform one contiguous patch according to ``anomaly``.

    Dents and bumps displace the patch along the surface normal with a
    spherical-cap profile, so the rim of the patch is a visible crease; every
    displaced point is labeled 1. Cracks remove a thin band through the patch
    and sink its rim, which is labeled 1.
    """
    if shape not in SHAPES:
        raise ValidationError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    if anomaly not in ANOMALIES:
        raise ValidationError(f"unknown anomaly {anomaly!r}; expected one of {ANOMALIES}")
    if n_points < 100:
        raise ValidationError("n_points must be >= 100")
    rng = np.random.default_rng(seed)
    sid = f"{shape}_{anomaly}_{seed}"
    if anomaly == "none":
        pts, _ = sample_surface(shape, n_points, rng)
        return PointCloud(pts, np.zeros(n_points, dtype=np.int64), class_name=shape, sample_id=sid)

    c, cn = sample_surface(shape, 1, rng)
    c, cn = c[0], cn[0]
    frac = rng.uniform(0.04, 0.10)
    radius = np.sqrt(frac * surface_area(shape) / np.pi)
    depth = 0.3 * radius
    t = _tangent(cn, rng)
    b = np.cross(cn, t)
    width = 0.12 * radius

    def patch_of(p, nrm):
        d = np.linalg.norm(p - c, axis=1)
        return (d < radius) & (nrm @ cn > 0.5), d

    if anomaly in ("dent", "bump"):
        pts, nrm = sample_surface(shape, n_points, rng)
        inside, d = patch_of(pts, nrm)
        prof = np.sqrt(np.clip(1 - (d / radius) ** 2, 0.0, None))
        sign = -1.0 if anomaly == "dent" else 1.0
        pts = pts + inside[:, None] * sign * depth * prof[:, None] * nrm
        labels = inside.astype(np.int64)
    else:
        kept_p, kept_n = [], []
        total = 0
        while total < n_points:
            p, nrm = sample_surface(shape, n_points, rng)
            inside, _ = patch_of(p, nrm)
            gap = inside & (np.abs((p - c) @ b) < width)
            p, nrm = p[~gap], nrm[~gap]
            kept_p.append(p)
            kept_n.append(nrm)
            total += p.shape[0]
        pts = np.concatenate(kept_p)[:n_points]
        nrm = np.concatenate(kept_n)[:n_points]
        inside, d = patch_of(pts, nrm)
        rim = inside & (np.abs((pts - c) @ b) < 2.5 * width)
        if not rim.any():
            rim[np.argmin(np.linalg.norm(pts - c, axis=1))] = True
        prof = np.sqrt(np.clip(1 - (d / radius) ** 2, 0.0, None))
        pts = pts - rim[:, None] * 0.5 * depth * prof[:, None] * nrm
        labels = rim.astype(np.int64)
    if not labels.any():
        labels[np.argmin(np.linalg.norm(pts - c, axis=1))] = 1
    return PointCloud(pts, labels, class_name=shape, sample_id=sid)

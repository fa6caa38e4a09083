"""Learnable hierarchical text prompts and their checkpoint format.

Four prompts, each ``E`` learnable word embeddings followed by frozen suffix
words: ``[V_1..V_E] object``, ``[W_1..W_E] damaged object`` on the rendering
layer and ``[V_1..V_E] point cloud``, ``[W_1..W_E] damaged point cloud`` on the
geometry layer. Class-aware mode swaps ``object``/``point cloud`` for the class
name.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

PROMPT_ORDER = ("rendering_normal", "rendering_abnormal", "geometry_normal", "geometry_abnormal")
MODES = ("object-agnostic", "class-aware")
PROMPT_LENGTHS = (6, 8, 10, 12, 14)
FORMAT_VERSION = 1
_MAGIC = b"PADPRMT\0"


class PromptFingerprintError(ValueError):
    pass


@dataclass
class PromptSet:
    learnable: np.ndarray  # 4 x E x d_word, rows in PROMPT_ORDER
    suffixes: tuple
    mode: str = "object-agnostic"
    class_name: Optional[str] = None
    backbone_id: str = "toy"
    warnings: list = field(default_factory=list)

    @property
    def E(self) -> int:
        return int(self.learnable.shape[1])

    @property
    def d_word(self) -> int:
        return int(self.learnable.shape[2])

    @property
    def rendering_normal(self):
        return self.learnable[0]

    @property
    def rendering_abnormal(self):
        return self.learnable[1]

    @property
    def geometry_normal(self):
        return self.learnable[2]

    @property
    def geometry_abnormal(self):
        return self.learnable[3]

    def fingerprint(self) -> dict:
        return {"E": self.E, "mode": self.mode, "backbone_id": self.backbone_id,
                "d_word": self.d_word, "version": FORMAT_VERSION}

    def copy(self) -> "PromptSet":
        return replace(self, learnable=np.array(self.learnable, copy=True), warnings=list(self.warnings))


def suffix_words(mode: str, class_name: Optional[str] = None) -> tuple:
    if mode == "object-agnostic":
        obj, cloud = ("object",), ("point", "cloud")
    elif mode == "class-aware":
        if not class_name:
            raise ValueError("class-aware prompts need a class_name")
        obj = cloud = tuple(class_name.replace("_", " ").split())
    else:
        raise ValueError(f"unknown prompt mode {mode!r}; expected one of {MODES}")
    return (obj, ("damaged",) + obj, cloud, ("damaged",) + cloud)


def init_prompts(mode: str = "object-agnostic", E: int = 12, seed: int = 0,
                 class_name: Optional[str] = None, d_word: int = 32,
                 backbone_id: str = "toy", std: float = 0.02) -> PromptSet:
    if E < 1:
        raise ValueError("E must be >= 1")
    suffixes = suffix_words(mode, class_name)
    rng = np.random.default_rng(seed)
    learnable = rng.normal(0.0, std, size=(4, E, d_word))
    return PromptSet(learnable, suffixes, mode, class_name if mode == "class-aware" else None,
                     backbone_id)


def save_checkpoint(path, ps: PromptSet, extras: Optional[dict] = None, info: Optional[dict] = None):
    """Write prompts (and optional named float arrays) as little-endian float64."""
    arrays = {"learnable": np.asarray(ps.learnable, dtype=np.float64)}
    for k, v in (extras or {}).items():
        arrays[k] = np.asarray(v, dtype=np.float64)
    index, offset = [], 0
    for name, a in arrays.items():
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    meta = {
        "fingerprint": ps.fingerprint(),
        "suffixes": [list(s) for s in ps.suffixes],
        "class_name": ps.class_name,
        "arrays": index,
        "info": info or {},
    }
    mb = json.dumps(meta, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", FORMAT_VERSION, len(mb)) + mb + payload)
    os.replace(tmp, path)


def load_checkpoint(path, expect: Optional[dict] = None, force: bool = False):
    """Return ``(PromptSet, extras, info)``.

    ``expect`` holds fingerprint fields (e.g. ``backbone_id``, ``E``) that must
    match; with ``force`` a mismatch is recorded in ``PromptSet.warnings``.
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path} is not a prompt checkpoint")
    version, mlen = struct.unpack_from("<II", raw, len(_MAGIC))
    if version != FORMAT_VERSION:
        raise PromptFingerprintError(f"checkpoint format version {version} != {FORMAT_VERSION}")
    start = len(_MAGIC) + 8
    meta = json.loads(raw[start:start + mlen])
    body = start + mlen
    arrays = {}
    for ent in meta["arrays"]:
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=body + ent["offset"])
        arrays[ent["name"]] = a.astype(np.float64).reshape(ent["shape"])
    fp = meta["fingerprint"]
    warnings_ = []
    for k, v in (expect or {}).items():
        if v is not None and fp.get(k) != v:
            msg = f"checkpoint fingerprint mismatch on {k}: file has {fp.get(k)!r}, expected {v!r}"
            if not force:
                raise PromptFingerprintError(msg)
            warnings_.append(msg)
    ps = PromptSet(
        learnable=arrays.pop("learnable"),
        suffixes=tuple(tuple(s) for s in meta["suffixes"]),
        mode=fp["mode"],
        class_name=meta["class_name"],
        backbone_id=fp["backbone_id"],
        warnings=warnings_,
    )
    return ps, arrays, meta.get("info", {})


def save_prompts(path, ps: PromptSet) -> None:
    save_checkpoint(path, ps)


def load_prompts(path, backbone_id: Optional[str] = None, E: Optional[int] = None,
                 mode: Optional[str] = None, force: bool = False) -> PromptSet:
    ps, _, _ = load_checkpoint(path, {"backbone_id": backbone_id, "E": E, "mode": mode}, force)
    return ps

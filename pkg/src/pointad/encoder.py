"""Frozen vision-language backbone interface, similarity primitives, feature cache.

The ``toy`` backend is a seeded stand-in for a CLIP-style model. The image is
reduced to band-pass shading responses on the object (a difference of
Gaussians and the gradient magnitude, both zeroed on and near the silhouette),
so that smooth surfaces of any shape look alike and local deformations stand
out. Each 14x14 patch of those responses goes through a fixed random
projection with a ReLU; a constant bias channel keeps every feature nonzero
and the global feature is the mean of the local grid. The text side is a fixed
linear map of the token sequence plus frozen positional embeddings, so
gradients with respect to the learnable prompt slots are exact and all
prompts start close to each other, as the text embeddings of a pretrained
model do.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from scipy.ndimage import binary_erosion, gaussian_filter

from ._tensor import DTYPE, any_tensor, out_like, to_tensor
from .prompts import PromptSet
from .renderer import ViewBundle

log = logging.getLogger(__name__)

PATCH = 14
# toy image front end: fine and coarse blur (pixels), foreground threshold, response gain
DOG_SIGMAS = (0.7, 3.0)
FG_THRESHOLD = 0.02
FG_ERODE = 2
RESPONSE_GAIN = 8.0
FEATURE_CACHE_VERSION = 1
_FEAT_MAGIC = b"PADFEAT\0"


class EncoderConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    backend: str = "toy"
    temperature: float = 0.01
    input_size: tuple[int, int] = (336, 336)
    weights_ref: Optional[str] = None
    seed: int = 0
    dim: int = 128
    d_word: int = 32
    context_length: int = 32
    pos_std: float = 0.05

    def __post_init__(self):
        if self.temperature <= 0:
            raise EncoderConfigError("temperature must be > 0")
        if self.backend not in ("toy", "pretrained"):
            raise EncoderConfigError(f"unknown backend {self.backend!r}")
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))


@dataclass
class FeatureBundle:
    global_feats: np.ndarray  # K x d
    local_maps: np.ndarray    # K x h x w x d
    backbone_id: str
    from_cache: bool = False

    @property
    def K(self) -> int:
        return int(self.global_feats.shape[0])

    @property
    def h(self) -> int:
        return int(self.local_maps.shape[1])

    @property
    def w(self) -> int:
        return int(self.local_maps.shape[2])

    @property
    def d(self) -> int:
        return int(self.local_maps.shape[3])


def similarity_softmax(g, f, tau: float):
    """Softmax over classes of ``cos(g_c, f) / tau``.

    ``g`` is C x d, ``f`` is ... x d; returns ... x C. Accepts numpy arrays or
    torch tensors and returns the same kind.
    """
    as_t = any_tensor(g, f)
    g, f = to_tensor(g), to_tensor(f)
    gn = torch.linalg.vector_norm(g, dim=-1, keepdim=True)
    fn = torch.linalg.vector_norm(f, dim=-1, keepdim=True)
    if bool((gn == 0).any()) or bool((fn == 0).any()):
        raise ValueError("zero-norm vector in similarity_softmax")
    cos = (f / fn) @ (g / gn).transpose(-1, -2)
    return out_like(torch.softmax(cos / tau, dim=-1), as_t)


def seg_map(g_pair, local, tau: float):
    """Per-cell class probabilities: h x w x d local grid -> h x w x C."""
    return similarity_softmax(g_pair, local, tau)


class ToyBackbone:
    """Seeded frozen encoder pair (vision + text) with no downloads."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), local_hook: Optional[Callable] = None):
        H, W = cfg.input_size
        if H % PATCH or W % PATCH:
            raise EncoderConfigError(f"input size {cfg.input_size} must be a multiple of {PATCH}")
        self.cfg = cfg
        self.local_hook = local_hook
        rng = np.random.default_rng(cfg.seed)
        pdim = PATCH * PATCH * 3
        self.proj = rng.normal(0.0, 2.0 / np.sqrt(pdim), size=(pdim, cfg.dim - 1))
        self.offset = rng.normal(0.0, 0.5, size=cfg.dim - 1)
        n_in = cfg.context_length * cfg.d_word
        self.text_map = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(cfg.dim, n_in))
        self.pos = rng.normal(0.0, cfg.pos_std, size=(cfg.context_length, cfg.d_word))
        self._text_map_t = torch.as_tensor(self.text_map, dtype=DTYPE)
        self._pos_t = torch.as_tensor(self.pos, dtype=DTYPE)
        self.image_calls = 0

    @property
    def backbone_id(self) -> str:
        c = self.cfg
        return f"toy-d{c.dim}-w{c.d_word}-p{c.pos_std:g}-s{c.seed}"

    @property
    def grid(self) -> tuple[int, int]:
        return self.cfg.input_size[0] // PATCH, self.cfg.input_size[1] // PATCH

    def word_embedding(self, word: str) -> np.ndarray:
        """Frozen vector for a suffix word, a pure function of (seed, word)."""
        digest = hashlib.sha256(f"{self.cfg.seed}:{word}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.normal(0.0, 0.02, size=self.cfg.d_word)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.proj, self.offset, self.text_map, self.pos):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    @staticmethod
    def responses(image: np.ndarray) -> np.ndarray:
        """H x W x 3 band-pass shading responses, zero on the background and silhouette."""
        gray = image.mean(axis=-1)
        fg = binary_erosion(gray > FG_THRESHOLD, iterations=FG_ERODE)
        fine = gaussian_filter(gray, DOG_SIGMAS[0])
        dog = (fine - gaussian_filter(gray, DOG_SIGMAS[1])) * fg
        gy, gx = np.gradient(fine)
        grad = np.hypot(gx, gy) * fg
        return RESPONSE_GAIN * np.stack([dog, np.abs(dog), grad], axis=-1)

    def encode_image(self, image: np.ndarray):
        """H x W x 3 image in [0, 1] -> (d global vector, h x w x d local grid)."""
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (*self.cfg.input_size, 3):
            raise EncoderConfigError(
                f"image shape {image.shape} does not match input size {self.cfg.input_size}"
            )
        self.image_calls += 1
        h, w = self.grid
        resp = self.responses(image)
        patches = resp.reshape(h, PATCH, w, PATCH, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, -1)
        feats = np.maximum(patches @ self.proj + self.offset, 0.0)
        local = np.concatenate([feats, np.ones((h, w, 1))], axis=-1)
        if self.local_hook is not None:
            local = self.local_hook(local)
        return local.mean(axis=(0, 1)), local

    def token_sequence(self, learnable, words) -> torch.Tensor:
        """Learnable slots, then frozen suffix word vectors, zero padded, plus positional embeddings."""
        learnable = to_tensor(learnable)
        L, dw = self.cfg.context_length, self.cfg.d_word
        if learnable.shape[-1] != dw:
            raise EncoderConfigError(f"word embedding dim {learnable.shape[-1]} != {dw}")
        suffix = torch.as_tensor(np.array([self.word_embedding(w) for w in words]).reshape(-1, dw),
                                 dtype=learnable.dtype)
        n_tok = learnable.shape[0] + suffix.shape[0]
        if n_tok > L:
            raise EncoderConfigError(f"prompt of {n_tok} tokens exceeds context length {L}")
        pad = torch.zeros(L - n_tok, dw, dtype=learnable.dtype)
        return torch.cat([learnable, suffix, pad], dim=0) + self._pos_t.to(learnable.dtype)

    def encode_prompts(self, prompts: PromptSet, learnable=None) -> torch.Tensor:
        """4 x d text embeddings (rendering n/a, geometry n/a); differentiable in ``learnable``."""
        learnable = prompts.learnable if learnable is None else learnable
        learnable = to_tensor(learnable)
        seqs = torch.stack([self.token_sequence(learnable[i], prompts.suffixes[i]) for i in range(4)])
        return seqs.reshape(4, -1) @ self._text_map_t.to(learnable.dtype).T


class PretrainedBackbone:
    """open_clip ViT wrapper (``weights_ref`` is ``"<arch>:<pretrained tag>"``).

    Text prompts follow the learnable-context recipe: the first ``E`` token
    embeddings after the start token are replaced by the learnable slots.
    """

    def __init__(self, cfg: EncoderConfig, local_hook: Optional[Callable] = None):
        try:
            import open_clip
        except ImportError as exc:
            raise EncoderConfigError(
                "the pretrained backend needs the 'open_clip_torch' package"
            ) from exc
        arch, _, tag = (cfg.weights_ref or "ViT-L-14-336:openai").partition(":")
        self.cfg = cfg
        self.local_hook = local_hook
        self._open_clip = open_clip
        self.model, _, _ = open_clip.create_model_and_transforms(arch, pretrained=tag or None)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = open_clip.get_tokenizer(arch)
        self._id = f"openclip-{arch}-{tag}"
        self.image_calls = 0

    @property
    def backbone_id(self) -> str:
        return self._id

    @property
    def grid(self) -> tuple[int, int]:
        return self.cfg.input_size[0] // PATCH, self.cfg.input_size[1] // PATCH

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.model.parameters():
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    @torch.no_grad()
    def encode_image(self, image: np.ndarray):
        if image.shape != (*self.cfg.input_size, 3):
            raise EncoderConfigError(
                f"image shape {image.shape} does not match input size {self.cfg.input_size}"
            )
        self.image_calls += 1
        visual = self.model.visual
        mean = torch.tensor(getattr(visual, "image_mean", None) or (0.48145466, 0.4578275, 0.40821073))
        std = torch.tensor(getattr(visual, "image_std", None) or (0.26862954, 0.26130258, 0.27577711))
        x = torch.as_tensor(np.asarray(image), dtype=torch.float32).permute(2, 0, 1)
        x = ((x - mean[:, None, None]) / std[:, None, None])[None]
        visual.output_tokens = True
        pooled, tokens = visual(x)
        h, w = self.grid
        local = tokens[0].reshape(h, w, -1).double().numpy()
        if self.local_hook is not None:
            local = self.local_hook(local)
        return pooled[0].double().numpy(), local

    def encode_prompts(self, prompts: PromptSet, learnable=None) -> torch.Tensor:
        m = self.model
        learnable = to_tensor(prompts.learnable if learnable is None else learnable)
        E = learnable.shape[1]
        texts = [" ".join(["X"] * E + list(s)) for s in prompts.suffixes]
        tokens = self.tokenizer(texts)
        emb = m.token_embedding(tokens).to(learnable.dtype)
        emb = torch.cat([emb[:, :1], learnable, emb[:, 1 + E:]], dim=1)
        x = emb + m.positional_embedding.to(emb.dtype)
        tr = m.transformer.to(emb.dtype)
        if getattr(tr, "batch_first", True):
            x = tr(x, attn_mask=m.attn_mask)
        else:
            x = tr(x.permute(1, 0, 2), attn_mask=m.attn_mask).permute(1, 0, 2)
        x = m.ln_final.to(emb.dtype)(x)
        eot = x[torch.arange(4), tokens.argmax(dim=-1)]
        return eot @ m.text_projection.to(emb.dtype)


def make_backbone(cfg: EncoderConfig, local_hook: Optional[Callable] = None):
    if cfg.backend == "toy":
        return ToyBackbone(cfg, local_hook)
    return PretrainedBackbone(cfg, local_hook)


def encode_bundle(bundle: ViewBundle, backbone) -> FeatureBundle:
    gl, lo = [], []
    for r in bundle.renderings:
        g, m = backbone.encode_image(r.image)
        gl.append(g)
        lo.append(m)
    return FeatureBundle(np.stack(gl).astype(np.float32), np.stack(lo).astype(np.float32),
                         backbone.backbone_id)


def feature_key(bundle: ViewBundle, backbone) -> str:
    h = hashlib.sha256()
    h.update(f"v{FEATURE_CACHE_VERSION}:{backbone.backbone_id}:{bundle.key}:".encode())
    h.update(json.dumps(bundle.config.to_json(), sort_keys=True).encode())
    for r in bundle.renderings:
        h.update(np.ascontiguousarray(r.image).tobytes())
    if getattr(backbone, "local_hook", None) is not None:
        h.update(repr(backbone.local_hook).encode())
    return h.hexdigest()[:32]


def write_features(path, fb: FeatureBundle, key: str) -> None:
    payload = (np.ascontiguousarray(fb.global_feats, dtype="<f4").tobytes()
               + np.ascontiguousarray(fb.local_maps, dtype="<f4").tobytes())
    meta = {"version": FEATURE_CACHE_VERSION, "K": fb.K, "h": fb.h, "w": fb.w, "d": fb.d,
            "backbone_id": fb.backbone_id, "hash": key,
            "payload_sha256": hashlib.sha256(payload).hexdigest()}
    mb = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(_FEAT_MAGIC + struct.pack("<II", FEATURE_CACHE_VERSION, len(mb)) + mb + payload)
    os.replace(tmp, path)


def read_features(path, key: Optional[str] = None) -> FeatureBundle:
    raw = Path(path).read_bytes()
    if not raw.startswith(_FEAT_MAGIC):
        raise ValueError("bad magic")
    version, mlen = struct.unpack_from("<II", raw, len(_FEAT_MAGIC))
    if version != FEATURE_CACHE_VERSION:
        raise ValueError(f"feature cache version {version}")
    start = len(_FEAT_MAGIC) + 8
    meta = json.loads(raw[start:start + mlen])
    payload = raw[start + mlen:]
    if hashlib.sha256(payload).hexdigest() != meta["payload_sha256"]:
        raise ValueError("payload checksum mismatch")
    if key is not None and meta["hash"] != key:
        raise ValueError("content hash mismatch")
    K, h, w, d = meta["K"], meta["h"], meta["w"], meta["d"]
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    gl = flat[: K * d].reshape(K, d)
    lo = flat[K * d:].reshape(K, h, w, d)
    return FeatureBundle(gl, lo, meta["backbone_id"], from_cache=True)


def cache_features(bundle: ViewBundle, backbone, cache_dir=None) -> FeatureBundle:
    """Encode every view once; later calls with an unchanged bundle read the cache."""
    if cache_dir is None:
        return encode_bundle(bundle, backbone)
    key = feature_key(bundle, backbone)
    path = Path(cache_dir) / f"{key}.feat"
    if path.exists():
        try:
            return read_features(path, key)
        except Exception as exc:
            warnings.warn(f"feature cache {path} corrupted ({exc}); recomputing")
    fb = encode_bundle(bundle, backbone)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_features(path, fb, key)
    return fb


@dataclass
class TextEmbeddings:
    """Encoded prompts in PROMPT_ORDER (rendering n/a, geometry n/a)."""

    vectors: np.ndarray
    backbone_id: str
    temperature: float = 0.01
    meta: dict = field(default_factory=dict)

    @property
    def rendering(self) -> np.ndarray:
        return self.vectors[0:2]

    @property
    def geometry(self) -> np.ndarray:
        return self.vectors[2:4]


def text_embeddings(backbone, prompts: PromptSet) -> TextEmbeddings:
    with torch.no_grad():
        v = backbone.encode_prompts(prompts).double().numpy()
    return TextEmbeddings(v, backbone.backbone_id, backbone.cfg.temperature)

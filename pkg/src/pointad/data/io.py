from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .ply import cloud_from_vertex, organized_shape, read_ply, write_ply
from .types import PointCloud, ValidationError

SPLITS = ("train", "test", "aux")


def load_rgb(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def save_rgb(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_point_cloud(
    path,
    format: str = "ply",
    rgb_path=None,
    rgb_index: Optional[np.ndarray] = None,
    class_name: str = "",
    sample_id: str = "",
) -> PointCloud:
    """Load a PLY cloud; ``format='organized-grid'`` requires the organized header.

    For organized clouds the RGB image must match the grid and the correspondence
    is the identity grid map. Unorganized clouds need an explicit ``rgb_index``
    (n x 2 rows/cols) to attach an image.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    vertex, comments = read_ply(path)
    if not class_name:
        for c in comments:
            if c.startswith("class "):
                class_name = c.split(None, 1)[1].strip()
    pc = cloud_from_vertex(vertex, class_name=class_name, sample_id=sample_id or path.stem)
    grid = organized_shape(comments)
    if format == "organized-grid":
        if grid is None:
            raise ValidationError(f"{path} has no 'organized <rows> <cols>' header comment")
        if grid[0] * grid[1] != pc.n:
            raise ValidationError(f"organized grid {grid} does not match {pc.n} vertices")
        pc.meta["grid"] = grid
    elif format != "ply":
        raise ValueError(f"unknown point cloud format {format!r}")

    if rgb_path is not None:
        rgb = load_rgb(rgb_path)
        if format == "organized-grid":
            if rgb.shape[:2] != grid:
                raise ValidationError(f"rgb {rgb.shape[:2]} is not aligned with grid {grid}")
            rows, cols = np.divmod(np.arange(pc.n), grid[1])
            rgb_index = np.stack([rows, cols], axis=1)
        elif rgb_index is None:
            raise ValidationError("unorganized cloud needs an explicit rgb correspondence")
        pc.rgb, pc.rgb_index = rgb, np.asarray(rgb_index, dtype=np.int64)
        pc.validate()
    return pc


def save_point_cloud(path, pc: PointCloud, binary: bool = True) -> None:
    write_ply(path, pc, binary=binary, organized=pc.meta.get("grid"))


@dataclass
class Sample:
    points: str
    class_name: str
    split: str = "test"
    labels: Optional[str] = None
    rgb: Optional[str] = None
    rgb_index: Optional[str] = None
    format: str = "ply"
    sample_id: str = ""


@dataclass
class DatasetManifest:
    dataset_name: str
    samples: list[Sample] = field(default_factory=list)
    root: Path = Path(".")

    def resolve(self, rel: Optional[str]) -> Optional[Path]:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def validate(self) -> None:
        for s in self.samples:
            if s.split not in SPLITS:
                raise ValidationError(f"{s.sample_id}: split {s.split!r} not in {SPLITS}")
            for rel in (s.points, s.labels, s.rgb, s.rgb_index):
                p = self.resolve(rel)
                if p is not None and not p.exists():
                    raise FileNotFoundError(f"manifest references missing file {p}")

    def classes(self) -> list[str]:
        return sorted({s.class_name for s in self.samples})

    def select(self, class_name: Optional[str] = None, splits=SPLITS) -> list[Sample]:
        return [
            s for s in self.samples
            if (class_name is None or s.class_name == class_name) and s.split in splits
        ]

    def load(self, sample: Sample) -> PointCloud:
        rgb_index = None
        if sample.rgb_index is not None:
            rgb_index = np.load(self.resolve(sample.rgb_index))
        pc = load_point_cloud(
            self.resolve(sample.points),
            format=sample.format,
            rgb_path=self.resolve(sample.rgb),
            rgb_index=rgb_index,
            class_name=sample.class_name,
            sample_id=sample.sample_id,
        )
        if sample.labels is not None:
            lab = np.load(self.resolve(sample.labels))
            pc.labels = np.asarray(lab).astype(np.int64)
            pc.validate()
        return pc

    def to_json(self) -> dict:
        return {"dataset_name": self.dataset_name, "samples": [asdict(s) for s in self.samples]}

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + f".tmp{os.getpid()}")
        tmp.write_text(json.dumps(self.to_json(), indent=1))
        os.replace(tmp, path)


def load_manifest(path, check: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} does not exist")
    data = json.loads(path.read_text())
    samples = []
    for i, s in enumerate(data["samples"]):
        s = dict(s)
        s.setdefault("sample_id", Path(s["points"]).stem or f"sample{i}")
        samples.append(Sample(**s))
    m = DatasetManifest(dataset_name=data.get("dataset_name", path.stem), samples=samples,
                        root=path.parent)
    if check:
        m.validate()
    return m

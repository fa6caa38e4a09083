"""Minimal PLY reader/writer for vertex clouds with an optional ``label`` property.

Organized clouds carry a ``comment organized <rows> <cols>`` header line; the
vertices are then the row-major grid and the RGB correspondence is the
identity grid map.
"""

from __future__ import annotations

import os
import re
from pathlib import Path
from typing import Optional

import numpy as np

from .types import PointCloud, ValidationError

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_ORGANIZED = re.compile(r"^organized\s+(\d+)\s+(\d+)\s*$")


class PLYParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def _parse_header(raw: bytes):
    if not raw.startswith(b"ply"):
        raise PLYParseError("missing 'ply' magic", 0)
    end = raw.find(b"end_header")
    if end < 0:
        raise PLYParseError("missing end_header", len(raw))
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1

    fmt = None
    comments = []
    elements = []  # [name, count, [(prop, dtype)]]
    offset = 0
    for line in raw[:end].split(b"\n"):
        line_offset = offset
        offset += len(line) + 1
        text = line.decode("ascii", errors="replace").strip()
        if not text or text == "ply":
            continue
        tok = text.split()
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PLYParseError(f"unsupported format line {text!r}", line_offset)
            fmt = tok[1]
        elif tok[0] in ("comment", "obj_info"):
            comments.append(text.split(None, 1)[1] if len(tok) > 1 else "")
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PLYParseError(f"bad element line {text!r}", line_offset)
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise PLYParseError("property before any element", line_offset)
            if tok[1] == "list":
                raise PLYParseError("list properties are not supported", line_offset)
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise PLYParseError(f"bad property line {text!r}", line_offset)
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise PLYParseError(f"unknown header keyword {tok[0]!r}", line_offset)
    if fmt is None:
        raise PLYParseError("missing format line", 0)
    return fmt, comments, elements, body_start


def read_ply(path) -> tuple[dict, list[str]]:
    """Read the vertex element of a PLY file as a dict of property arrays."""
    raw = Path(path).read_bytes()
    fmt, comments, elements, pos = _parse_header(raw)
    vertex = None
    for name, count, props in elements:
        if fmt == "ascii":
            rows = []
            for _ in range(count):
                nl = raw.find(b"\n", pos)
                nl = len(raw) if nl < 0 else nl
                fields = raw[pos:nl].split()
                if len(fields) != len(props):
                    raise PLYParseError(
                        f"expected {len(props)} values in {name} row, got {len(fields)}", pos
                    )
                try:
                    rows.append([float(f) for f in fields])
                except ValueError:
                    raise PLYParseError(f"non-numeric value in {name} row", pos) from None
                pos = nl + 1
            arr = np.array(rows, dtype=np.float64).reshape(count, len(props))
            data = {p: arr[:, i].astype(dt) for i, (p, dt) in enumerate(props)}
        else:
            order = "<" if fmt == "binary_little_endian" else ">"
            dtype = np.dtype([(p, order + dt) for p, dt in props])
            need = dtype.itemsize * count
            if pos + need > len(raw):
                raise PLYParseError(
                    f"truncated binary body for element {name}: need {need} bytes", len(raw)
                )
            rec = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
            data = {p: rec[p].astype(rec[p].dtype.newbyteorder("=")) for p, _ in props}
            pos += need
        if name == "vertex":
            vertex = data
            break
    if vertex is None:
        raise PLYParseError("no vertex element", 0)
    for axis in "xyz":
        if axis not in vertex:
            raise PLYParseError(f"vertex element lacks property {axis!r}", 0)
    return vertex, comments


def organized_shape(comments: list[str]) -> Optional[tuple[int, int]]:
    for c in comments:
        m = _ORGANIZED.match(c.strip())
        if m:
            return int(m.group(1)), int(m.group(2))
    return None


def write_ply(path, pc: PointCloud, binary: bool = True, organized: Optional[tuple[int, int]] = None):
    """Write ``pc`` with float64 coordinates so reads round-trip exactly."""
    path = Path(path)
    n = pc.n
    lines = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    if organized is not None:
        if organized[0] * organized[1] != n:
            raise ValidationError(f"organized grid {organized} does not hold {n} points")
        lines.append(f"comment organized {organized[0]} {organized[1]}")
    if pc.class_name:
        lines.append(f"comment class {pc.class_name}")
    lines += [f"element vertex {n}", "property double x", "property double y", "property double z"]
    if pc.labels is not None:
        lines.append("property uchar label")
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")

    if binary:
        fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
        if pc.labels is not None:
            fields.append(("label", "u1"))
        rec = np.empty(n, dtype=fields)
        rec["x"], rec["y"], rec["z"] = pc.points.T
        if pc.labels is not None:
            rec["label"] = pc.labels
        body = rec.tobytes()
    else:
        rows = []
        for j in range(n):
            vals = [repr(float(v)) for v in pc.points[j]]
            if pc.labels is not None:
                vals.append(str(int(pc.labels[j])))
            rows.append(" ".join(vals))
        body = ("\n".join(rows) + "\n").encode("ascii")

    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(header + body)
    os.replace(tmp, path)


def cloud_from_vertex(vertex: dict, class_name: str = "", sample_id: str = "") -> PointCloud:
    pts = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(np.float64)
    labels = None
    if "label" in vertex:
        lab = np.asarray(vertex["label"], dtype=np.float64)
        if not np.isin(lab, (0, 1)).all():
            raise ValidationError("label property has values outside {0, 1}")
        labels = lab.astype(np.int64)
    return PointCloud(points=pts, labels=labels, class_name=class_name, sample_id=sample_id)

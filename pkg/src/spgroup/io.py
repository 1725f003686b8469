"""Readers and writers for point clouds, features, labels, depth maps and manifests.

Binary formats are little-endian throughout:

* ``LGSPFEAT``: 8-byte magic, u32 version, u64 rows, u32 dim, u8 has_mask,
  rows*dim f32 row-major, then ``rows`` mask bytes when has_mask is set.
* ``LGSPLBL\\0``: 8-byte magic, u32 version, u64 rows, rows i32.
* ``LGSPDPTH``: 8-byte magic, u32 width, u32 height, width*height u16 (mm).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import IGNORE, FeatureSet, PointCloud

FEAT_MAGIC = b"LGSPFEAT"
LABEL_MAGIC = b"LGSPLBL\0"
DEPTH_MAGIC = b"LGSPDPTH"
FORMAT_VERSION = 1

_FEAT_HEADER = struct.Struct("<8sIQIB")
_LABEL_HEADER = struct.Struct("<8sIQ")
_DEPTH_HEADER = struct.Struct("<8sII")


class FormatError(ValueError):
    """Raised when a file does not follow its declared format."""


# --------------------------------------------------------------------------- PLY

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


def _parse_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise FormatError("malformed header: missing 'ply' magic line")
    fmt = None
    elements = []  # [name, count, [(prop, dtype)]]
    while True:
        raw = fh.readline()
        if not raw:
            raise FormatError("malformed header: missing end_header")
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "end_header":
            break
        if key == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise FormatError(f"malformed header: unsupported format {' '.join(tokens[1:])!r}")
            fmt = tokens[1]
        elif key == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise FormatError(f"malformed header: bad element line {raw!r}")
            elements.append([tokens[1], int(tokens[2]), []])
        elif key == "property":
            if not elements:
                raise FormatError("malformed header: property before any element")
            if tokens[1] == "list":
                elements[-1][2].append((tokens[-1], None))
            else:
                if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                    raise FormatError(f"malformed header: bad property line {raw!r}")
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise FormatError(f"malformed header: unknown keyword {key!r}")
    if fmt is None:
        raise FormatError("malformed header: missing format line")
    return fmt, elements


def read_point_cloud(path, scene_id: str | None = None) -> PointCloud:
    """Read an ASCII or binary little-endian PLY with x,y,z and red,green,blue.

    8-bit color channels are divided by 255; float colors are taken as-is.
    An optional integer ``label`` vertex property becomes ``gt_labels``.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        names = [e[0] for e in elements]
        if "vertex" not in names:
            raise FormatError("missing element: vertex")
        vidx = names.index("vertex")
        if fmt == "binary_little_endian":
            for name, _, eprops in elements[:vidx]:
                if any(dt is None for _, dt in eprops):
                    raise FormatError(f"unsupported list element {name!r} before vertex")
        _, count, props = elements[vidx]
        if any(dt is None for _, dt in props):
            raise FormatError("unsupported list property in vertex element")
        pnames = [p for p, _ in props]
        for req in ("x", "y", "z", "red", "green", "blue"):
            if req not in pnames:
                raise FormatError(f"missing vertex property: {req}")
        if count < 1:
            raise FormatError("N ≥ 1 violated: vertex element is empty")
        dtype = np.dtype([(p, "<" + dt) for p, dt in props])
        if fmt == "binary_little_endian":
            for _, ecount, eprops in elements[:vidx]:
                fh.seek(ecount * np.dtype([(p, "<" + dt) for p, dt in eprops]).itemsize, 1)
            buf = fh.read(count * dtype.itemsize)
            if len(buf) < count * dtype.itemsize:
                raise FormatError(f"vertex data truncated: expected {count} vertices")
            rec = np.frombuffer(buf, dtype=dtype, count=count)
        else:
            for _, ecount, _ in elements[:vidx]:
                for _ in range(ecount):
                    fh.readline()
            rows = []
            for i in range(count):
                line = fh.readline()
                vals = line.split()
                if len(vals) < len(props):
                    raise FormatError(f"vertex {i}: expected {len(props)} values, got {len(vals)}")
                rows.append(tuple(vals[: len(props)]))
            try:
                rec = np.array(rows, dtype=[(p, "U32") for p in pnames]).astype(dtype)
            except ValueError as exc:
                raise FormatError(f"vertex data unparsable: {exc}") from None

    pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    bad = ~np.isfinite(pos).all(axis=1)
    if bad.any():
        raise FormatError(f"non-finite coordinates at vertex {int(np.flatnonzero(bad)[0])}")
    col = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    if np.issubdtype(col.dtype, np.integer):
        col = col.astype(np.float64) / 255.0
    else:
        col = col.astype(np.float64)
    labels = rec["label"].astype(np.int64) if "label" in pnames else None
    return PointCloud(scene_id or path.stem, pos, col, labels)


def write_point_cloud(cloud: PointCloud, path, ascii: bool = False, with_labels: bool = True) -> None:
    """Write float x,y,z + uchar red,green,blue (+ int label if present)."""
    has_label = with_labels and cloud.gt_labels is not None
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
              ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if has_label:
        fields.append(("label", "<i4"))
    rec = np.empty(cloud.n_points, dtype=fields)
    for i, axis in enumerate("xyz"):
        rec[axis] = cloud.positions[:, i]
    rgb = np.round(cloud.colors * 255.0).astype(np.uint8)
    for i, ch in enumerate(("red", "green", "blue")):
        rec[ch] = rgb[:, i]
    if has_label:
        rec["label"] = cloud.gt_labels
    header = ["ply", f"format {'ascii' if ascii else 'binary_little_endian'} 1.0",
              f"element vertex {cloud.n_points}",
              "property float x", "property float y", "property float z",
              "property uchar red", "property uchar green", "property uchar blue"]
    if has_label:
        header.append("property int label")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if ascii:
            for r in rec:
                vals = [repr(float(r[a])) for a in "xyz"] + [str(int(r[c])) for c in ("red", "green", "blue")]
                if has_label:
                    vals.append(str(int(r["label"])))
                fh.write((" ".join(vals) + "\n").encode("ascii"))
        else:
            fh.write(rec.tobytes())


# ---------------------------------------------------------------------- features

def write_feature_set(features: FeatureSet, path, with_mask: bool | None = None) -> None:
    values = np.ascontiguousarray(features.values, dtype="<f4")
    if with_mask is None:
        with_mask = not features.all_valid
    rows, dim = values.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEAT_MAGIC, FORMAT_VERSION, rows, dim, int(bool(with_mask))))
        fh.write(values.tobytes())
        if with_mask:
            fh.write(features.valid_mask.astype(np.uint8).tobytes())


def read_feature_set(path) -> FeatureSet:
    data = Path(path).read_bytes()
    if len(data) < _FEAT_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, dim, has_mask = _FEAT_HEADER.unpack_from(data)
    if magic != FEAT_MAGIC:
        raise FormatError(f"{path}: magic mismatch, expected LGSPFEAT")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if has_mask not in (0, 1):
        raise FormatError(f"{path}: has_mask must be 0 or 1")
    expected = _FEAT_HEADER.size + rows * dim * 4 + (rows if has_mask else 0)
    if len(data) < expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise FormatError(f"{path}: size mismatch, {len(data) - expected} trailing bytes")
    off = _FEAT_HEADER.size
    values = np.frombuffer(data, dtype="<f4", count=rows * dim, offset=off).reshape(rows, dim)
    mask = None
    if has_mask:
        raw = np.frombuffer(data, dtype=np.uint8, count=rows, offset=off + rows * dim * 4)
        if raw.max(initial=0) > 1:
            raise FormatError(f"{path}: mask bytes must be 0 or 1")
        mask = raw.astype(bool)
    return FeatureSet(values.astype(np.float32), mask)


# ------------------------------------------------------------------------ labels

def write_labels(labels, path, n_classes: int | None = None) -> None:
    """Write an int label vector; -1 marks ignored/undefined entries."""
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValueError("labels must be 1-D")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ValueError("labels must be integers")
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < IGNORE:
        raise ValueError(f"label {int(arr.min())} below sentinel -1")
    if n_classes is not None and arr.size and arr.max() >= n_classes:
        raise ValueError(f"label {int(arr.max())} >= declared class count {n_classes}")
    if arr.size and arr.max() > np.iinfo(np.int32).max:
        raise ValueError("label does not fit in int32")
    with open(path, "wb") as fh:
        fh.write(_LABEL_HEADER.pack(LABEL_MAGIC, FORMAT_VERSION, arr.size))
        fh.write(arr.astype("<i4").tobytes())


def read_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _LABEL_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows = _LABEL_HEADER.unpack_from(data)
    if magic != LABEL_MAGIC:
        raise FormatError(f"{path}: magic mismatch, expected LGSPLBL")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(data) != _LABEL_HEADER.size + 4 * rows:
        raise FormatError(f"{path}: size mismatch between header ({rows} rows) and payload")
    return np.frombuffer(data, dtype="<i4", offset=_LABEL_HEADER.size).astype(np.int64)


# ------------------------------------------------------------------------- depth

def write_depth(depth_mm: np.ndarray, path) -> None:
    d = np.asarray(depth_mm)
    if d.ndim != 2:
        raise ValueError("depth map must be height x width")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, w, h))
        fh.write(np.ascontiguousarray(d, dtype="<u2").tobytes())


def read_depth(path) -> np.ndarray:
    """Return a height x width uint16 array of depths in millimeters."""
    data = Path(path).read_bytes()
    if len(data) < _DEPTH_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, w, h = _DEPTH_HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise FormatError(f"{path}: magic mismatch, expected LGSPDPTH")
    if len(data) != _DEPTH_HEADER.size + 2 * w * h:
        raise FormatError(f"{path}: size mismatch for {w}x{h} depth map")
    return np.frombuffer(data, dtype="<u2", offset=_DEPTH_HEADER.size).reshape(h, w).astype(np.uint16)


# ---------------------------------------------------------------------- manifest

@dataclass(frozen=True)
class SceneEntry:
    scene_id: str
    points: Path
    features: Path | None = None
    labels: Path | None = None
    views: tuple = ()


@dataclass(frozen=True)
class DatasetManifest:
    scenes: tuple
    root: Path = field(default=Path("."))

    @property
    def scene_ids(self) -> list[str]:
        return [s.scene_id for s in self.scenes]


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest JSON; relative paths resolve against its directory.

    Schema::

        {"scenes": [{"scene_id": "s0", "points": "s0.ply",
                     "features": "s0.feat", "labels": "s0.gt.lbl",
                     "views": [{"intrinsics": [...9], "extrinsics": [...16],
                                "depth": "v0.dpth", "features": "v0.feat",
                                "stride": 1}]}]}
    """
    path = Path(path)
    root = path.parent
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict) or not isinstance(doc.get("scenes"), list):
        raise FormatError(f"{path}: manifest must be an object with a 'scenes' list")

    def resolve(p):
        if p is None:
            return None
        q = Path(p)
        q = q if q.is_absolute() else root / q
        if not q.exists():
            raise FileNotFoundError(f"manifest references missing file {q}")
        return q

    scenes, seen = [], set()
    for i, s in enumerate(doc["scenes"]):
        if "points" not in s:
            raise FormatError(f"{path}: scene {i} has no 'points' entry")
        sid = str(s.get("scene_id", Path(s["points"]).stem))
        if sid in seen:
            raise FormatError(f"{path}: duplicate scene_id {sid!r}")
        seen.add(sid)
        views = []
        for v in s.get("views", []):
            v = dict(v)
            v["depth"] = resolve(v["depth"])
            v["features"] = resolve(v["features"])
            views.append(v)
        scenes.append(SceneEntry(sid, resolve(s["points"]), resolve(s.get("features")),
                                 resolve(s.get("labels")), tuple(views)))
    return DatasetManifest(tuple(scenes), root)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)

    def rel(p):
        if p is None:
            return None
        p = Path(p)
        try:
            return str(p.relative_to(path.parent))
        except ValueError:
            return str(p)

    out = []
    for s in manifest.scenes:
        entry = {"scene_id": s.scene_id, "points": rel(s.points)}
        if s.features is not None:
            entry["features"] = rel(s.features)
        if s.labels is not None:
            entry["labels"] = rel(s.labels)
        if s.views:
            entry["views"] = [dict(v, depth=rel(v["depth"]), features=rel(v["features"])) for v in s.views]
        out.append(entry)
    path.write_text(json.dumps({"scenes": out}, indent=2) + "\n")


def load_scene_cloud(entry: SceneEntry) -> PointCloud:
    """Read a scene's cloud, attaching labels from the label file if given."""
    cloud = read_point_cloud(entry.points, entry.scene_id)
    if entry.labels is not None:
        gt = read_labels(entry.labels)
        if gt.shape[0] != cloud.n_points:
            raise FormatError(f"{entry.labels}: {gt.shape[0]} labels for {cloud.n_points} points")
        cloud = PointCloud(cloud.scene_id, cloud.positions, cloud.colors, gt)
    return cloud

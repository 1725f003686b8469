"""Lift 2D feature maps onto 3D points with depth-checked pinhole projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureSet, PointCloud
from .io import read_depth, read_feature_set


@dataclass(frozen=True)
class ProjectionConfig:
    depth_tolerance: float = 0.05
    min_views: int = 1

    def __post_init__(self):
        if not self.depth_tolerance > 0:
            raise ValueError("depth_tolerance must be > 0")
        if self.min_views < 1:
            raise ValueError("min_views must be >= 1")


@dataclass(frozen=True)
class CameraView:
    """One RGB-D frame: K, camera-to-world pose, depth (mm) and a strided feature grid.

    ``features`` has shape (ceil(height / stride), ceil(width / stride), D).
    """

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    depth: np.ndarray
    features: np.ndarray
    stride: int = 1

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        if not (k[0, 0] > 0 and k[1, 1] > 0):
            raise ValueError("focal lengths fx, fy must be > 0")
        rot = t[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-6 or np.linalg.det(rot) <= 0:
            raise ValueError("extrinsics rotation must be orthonormal with determinant +1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        depth = np.asarray(self.depth)
        if depth.ndim != 2:
            raise ValueError("depth must be height x width")
        h, w = depth.shape
        feats = np.asarray(self.features)
        expect = (-(-h // self.stride), -(-w // self.stride))
        if feats.ndim != 3 or feats.shape[:2] != expect:
            raise ValueError(f"feature grid must be {expect} x D for stride {self.stride}, got {feats.shape}")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "extrinsics", t)
        object.__setattr__(self, "depth", depth.astype(np.uint16))
        object.__setattr__(self, "features", feats)

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @classmethod
    def from_json(cls, entry: dict) -> "CameraView":
        """Build a view from a manifest camera record (paths already resolved)."""
        depth = read_depth(entry["depth"])
        stride = int(entry.get("stride", 1))
        fs = read_feature_set(entry["features"])
        gh, gw = -(-depth.shape[0] // stride), -(-depth.shape[1] // stride)
        if fs.rows != gh * gw:
            raise ValueError(f"{entry['features']}: {fs.rows} rows, expected {gh}x{gw} grid cells")
        return cls(np.asarray(entry["intrinsics"], dtype=np.float64),
                   np.asarray(entry["extrinsics"], dtype=np.float64),
                   depth, np.asarray(fs.values).reshape(gh, gw, fs.dim), stride)


def project_view(cloud: PointCloud, view: CameraView, config: ProjectionConfig = ProjectionConfig()):
    """Feature of each point's pixel in one view, plus the hit mask.

    A point hits when it has positive camera depth z, lands inside the image
    (pixel = rounded projection), the depth map there is non-zero, and
    ``|z - depth| <= depth_tolerance``. Features come from grid cell
    ``(v // stride, u // stride)``.
    """
    rot = view.extrinsics[:3, :3]
    trans = view.extrinsics[:3, 3]
    cam = (cloud.positions - trans) @ rot  # world -> camera, R^T (x - t) per row
    z = cam[:, 2]
    hit = z > 0
    uvw = cam @ view.intrinsics.T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(hit, uvw[:, 0] / z, -1.0)
        v = np.where(hit, uvw[:, 1] / z, -1.0)
    pu = np.floor(u + 0.5)
    pv = np.floor(v + 0.5)
    hit &= (pu >= 0) & (pu < view.width) & (pv >= 0) & (pv < view.height)
    pu = np.where(hit, pu, 0).astype(np.int64)
    pv = np.where(hit, pv, 0).astype(np.int64)
    d = view.depth[pv, pu].astype(np.float64) / 1000.0
    hit &= d > 0
    hit &= np.abs(z - d) <= config.depth_tolerance
    feats = np.zeros((cloud.n_points, view.features.shape[2]), dtype=np.float64)
    feats[hit] = view.features[pv[hit] // view.stride, pu[hit] // view.stride]
    return feats, hit


def aggregate_views(cloud: PointCloud, views, config: ProjectionConfig = ProjectionConfig()) -> FeatureSet:
    """Mean of the features a point receives over all views, in view order.

    Points with fewer than ``min_views`` hits are masked invalid.
    """
    views = list(views)
    if not views:
        raise ValueError("at least one view is required")
    total = None
    hits = np.zeros(cloud.n_points, dtype=np.int64)
    for view in views:
        f, h = project_view(cloud, view, config)
        total = f if total is None else total + f
        hits += h
    valid = hits >= config.min_views
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(valid[:, None], total / np.maximum(hits, 1)[:, None], 0.0)
    return FeatureSet(mean, valid)

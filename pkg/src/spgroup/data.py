"""Domain types shared across the pipeline.

All containers are frozen dataclasses whose arrays are marked read-only on
construction, so they can be handed to worker threads without copying.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IGNORE = -1


def _frozen(a: np.ndarray) -> np.ndarray:
    if not a.flags.writeable and a.flags.c_contiguous:
        return a
    a = np.array(a, order="C")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    """One scene: N positions (meters), N colors in [0, 1], optional labels."""

    scene_id: str
    positions: np.ndarray
    colors: np.ndarray
    gt_labels: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        col = np.asarray(self.colors, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be N x 3, got {pos.shape}")
        if pos.shape[0] < 1:
            raise ValueError("N ≥ 1 violated: point cloud is empty")
        if col.shape != pos.shape:
            raise ValueError(f"colors shape {col.shape} != positions shape {pos.shape}")
        bad = ~np.isfinite(pos).all(axis=1)
        if bad.any():
            raise ValueError(f"non-finite coordinates at vertex {int(np.flatnonzero(bad)[0])}")
        if not np.isfinite(col).all() or col.min() < 0.0 or col.max() > 1.0:
            raise ValueError("colors must lie within [0, 1]")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "colors", _frozen(col))
        if self.gt_labels is not None:
            gt = np.asarray(self.gt_labels, dtype=np.int64)
            if gt.shape != (pos.shape[0],):
                raise ValueError(f"gt_labels length {gt.shape} != N={pos.shape[0]}")
            if gt.size and gt.min() < IGNORE:
                raise ValueError("gt_labels must be >= -1")
            object.__setattr__(self, "gt_labels", _frozen(gt))

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class FeatureSet:
    """Dense rows x dim feature matrix with a per-row validity mask."""

    values: np.ndarray
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise ValueError(f"feature values must be 2-D, got shape {vals.shape}")
        if not np.issubdtype(vals.dtype, np.floating):
            vals = vals.astype(np.float64)
        if self.valid_mask is None:
            mask = np.ones(vals.shape[0], dtype=bool)
        else:
            mask = np.asarray(self.valid_mask, dtype=bool)
            if mask.shape != (vals.shape[0],):
                raise ValueError(f"valid_mask length {mask.shape} != rows {vals.shape[0]}")
        if not np.isfinite(vals[mask]).all():
            raise ValueError("feature values must be finite on valid rows")
        object.__setattr__(self, "values", _frozen(vals))
        object.__setattr__(self, "valid_mask", _frozen(mask))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def all_valid(self) -> bool:
        return bool(self.valid_mask.all())


@dataclass(frozen=True)
class SuperpointPartition:
    """Per-point superpoint IDs for one scene.

    ``history`` holds one old-ID -> new-ID map per coarsening step, so the
    current partition can be rebuilt from the level-0 assignment.
    """

    scene_id: str
    point_to_sp: np.ndarray
    level: int = 0
    history: tuple = field(default=(), repr=False)

    def __post_init__(self):
        ids = np.asarray(self.point_to_sp, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("point_to_sp must be a non-empty 1-D array")
        m = int(ids.max()) + 1
        if ids.min() < 0 or np.bincount(ids, minlength=m).min() == 0:
            raise ValueError("superpoint IDs must be dense in [0, M)")
        object.__setattr__(self, "point_to_sp", _frozen(ids))
        object.__setattr__(self, "history", tuple(_frozen(np.asarray(h, dtype=np.int64)) for h in self.history))

    @property
    def n_superpoints(self) -> int:
        return int(self.point_to_sp.max()) + 1

    @property
    def n_points(self) -> int:
        return self.point_to_sp.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.point_to_sp, minlength=self.n_superpoints)

    def coarsen(self, mapping: np.ndarray) -> "SuperpointPartition":
        """Merge superpoints: old ID ``i`` becomes ``mapping[i]``."""
        mapping = np.asarray(mapping, dtype=np.int64)
        if mapping.shape != (self.n_superpoints,):
            raise ValueError(f"mapping length {mapping.shape} != M={self.n_superpoints}")
        return SuperpointPartition(
            self.scene_id,
            mapping[self.point_to_sp],
            level=self.level + 1,
            history=self.history + (mapping,),
        )

    def replay(self, base: np.ndarray) -> np.ndarray:
        """Apply the stored coarsening history to a level-0 assignment."""
        ids = np.asarray(base, dtype=np.int64)
        for mapping in self.history:
            ids = mapping[ids]
        return ids


@dataclass(frozen=True)
class LabelAssignment:
    """Class IDs per superpoint (global order) and expanded per point, per scene."""

    per_sp: np.ndarray
    n_classes: int
    per_point: dict = field(default_factory=dict)

    def __post_init__(self):
        sp = np.asarray(self.per_sp, dtype=np.int64)
        if sp.size and (sp.min() < 0 or sp.max() >= self.n_classes):
            raise ValueError(f"superpoint labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "per_sp", _frozen(sp))

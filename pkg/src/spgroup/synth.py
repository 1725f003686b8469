"""Synthetic scenes with known classes for end-to-end checks.

Each scene holds axis-aligned boxes sampled on their surfaces. Every box
carries one class; per-point features are the class mean plus isotropic
Gaussian noise, so both the geometric (superpoints) and the feature path
(grouping) have a recoverable ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FeatureSet, PointCloud
from .io import DatasetManifest, SceneEntry, write_feature_set, write_labels, write_manifest, write_point_cloud


@dataclass(frozen=True)
class SynthConfig:
    scenes: int = 20
    classes: int = 5
    objects: int = 6
    dim: int = 16
    separation: float = 10.0
    noise: float = 0.1
    spacing: float = 0.05
    rng_seed: int = 42

    def __post_init__(self):
        for name in ("scenes", "classes", "objects", "dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.separation > 0:
            raise ValueError("separation must be > 0")
        if self.noise < 0 or not self.spacing > 0:
            raise ValueError("noise must be >= 0 and spacing > 0")


def class_means(classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """``classes`` points in R^dim with minimum pairwise distance ``separation``.

    When dim >= classes the means are a rotated, scaled simplex and every
    pair sits exactly ``separation`` apart.
    """
    if classes == 1:
        return np.zeros((1, dim))
    if dim >= classes:
        q, _ = np.linalg.qr(rng.normal(size=(dim, classes)))
        return separation / np.sqrt(2.0) * q.T
    means = rng.normal(size=(classes, dim))
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    return means * separation / d[np.triu_indices(classes, 1)].min()


def box_surface(lo: np.ndarray, hi: np.ndarray, spacing: float) -> np.ndarray:
    """Regular samples on all six faces of the box [lo, hi]."""
    pts = []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        ga = np.linspace(lo[a], hi[a], max(2, int(round((hi[a] - lo[a]) / spacing)) + 1))
        gb = np.linspace(lo[b], hi[b], max(2, int(round((hi[b] - lo[b]) / spacing)) + 1))
        ua, ub = np.meshgrid(ga, gb, indexing="ij")
        for side in (lo[axis], hi[axis]):
            face = np.empty((ua.size, 3))
            face[:, a], face[:, b], face[:, axis] = ua.ravel(), ub.ravel(), side
            pts.append(face)
    return np.unique(np.round(np.vstack(pts), 9), axis=0)


def make_scene(scene_id: str, box_classes, means, config: SynthConfig, rng: np.random.Generator):
    """One scene: returns (PointCloud with gt labels, FeatureSet)."""
    cols = int(np.ceil(np.sqrt(len(box_classes))))
    pitch = 1.6
    palette = rng.random((len(means), 3))
    pos, lab = [], []
    for i, c in enumerate(box_classes):
        size = rng.uniform(0.4, 1.0, 3)
        corner = np.array([(i % cols) * pitch, (i // cols) * pitch, 0.0])
        corner[:2] += rng.uniform(0.0, pitch - 1.0 - 0.1, 2)
        p = box_surface(corner, corner + size, config.spacing)
        pos.append(p)
        lab.append(np.full(p.shape[0], c, dtype=np.int64))
    pos = np.vstack(pos).astype(np.float32).astype(np.float64)
    lab = np.concatenate(lab)
    colors = np.clip(palette[lab] + rng.normal(0, 0.05, (lab.size, 3)), 0, 1)
    colors = np.round(colors * 255) / 255
    feats = means[lab] + config.noise * rng.normal(size=(lab.size, means.shape[1]))
    return PointCloud(scene_id, pos, colors, lab), FeatureSet(feats.astype(np.float32))


def synth_scenes(config: SynthConfig, out_dir) -> Path:
    """Write scenes, features, labels and ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.rng_seed)
    means = class_means(config.classes, config.dim, config.separation, rng)
    total = config.scenes * config.objects
    classes = rng.permutation(np.arange(total) % config.classes).reshape(config.scenes, config.objects)
    entries = []
    for h in range(config.scenes):
        sid = f"scene_{h:03d}"
        cloud, feats = make_scene(sid, classes[h], means, config, rng)
        write_point_cloud(cloud, out / f"{sid}.ply")
        write_feature_set(feats, out / f"{sid}.feat")
        write_labels(cloud.gt_labels, out / f"{sid}.gt.lbl", n_classes=config.classes)
        entries.append(SceneEntry(sid, out / f"{sid}.ply", out / f"{sid}.feat", out / f"{sid}.gt.lbl"))
    manifest = out / "manifest.json"
    write_manifest(DatasetManifest(tuple(entries), out), manifest)
    return manifest

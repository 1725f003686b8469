"""Initial superpoint construction.

Indoor scenes: voxel downsampling, PCA normals, normal-based region growing,
then a seed-grid split at ``voxel_resolution`` so that the resolution knob
trades superpoint count against purity. Outdoor scenes: one RANSAC ground
plane followed by Euclidean clustering of the remaining points.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .data import PointCloud, SuperpointPartition

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InitConfig:
    mode: str = "indoor"
    voxel_size: float = 0.05
    voxel_resolution: float | None = 0.5
    normal_knn: int = 30
    angle_threshold: float = 10.0
    curvature_threshold: float = 0.05
    neighbor_knn: int = 10
    neighbor_radius: float | None = None
    min_region_size: int = 20
    ransac_distance: float = 0.2
    cluster_distance: float = 0.2
    ransac_iters: int = 1000
    seed: int = 42

    def __post_init__(self):
        if self.mode not in ("indoor", "outdoor"):
            raise ValueError(f"mode must be 'indoor' or 'outdoor', got {self.mode!r}")
        for name in ("voxel_size", "angle_threshold", "curvature_threshold",
                     "ransac_distance", "cluster_distance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.voxel_resolution is not None and not self.voxel_resolution > 0:
            raise ValueError("voxel_resolution must be > 0")
        if self.neighbor_radius is not None and not self.neighbor_radius > 0:
            raise ValueError("neighbor_radius must be > 0")
        if self.normal_knn < 3 or self.neighbor_knn < 1 or self.ransac_iters < 1 or self.min_region_size < 1:
            raise ValueError("normal_knn >= 3, neighbor_knn >= 1, ransac_iters >= 1, min_region_size >= 1 required")

    @property
    def graph_radius(self) -> float:
        return self.neighbor_radius if self.neighbor_radius is not None else 3.0 * self.voxel_size


class Normals(NamedTuple):
    vectors: np.ndarray
    valid: np.ndarray
    curvature: np.ndarray


@dataclass(frozen=True)
class PlaneModel:
    normal: np.ndarray
    offset: float
    inlier_ids: np.ndarray

    def distances(self, positions: np.ndarray) -> np.ndarray:
        return np.abs(positions @ self.normal + self.offset)


def _canonical_sign(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Flip rows so z > 0; on a zero z fall back to y, then x."""
    v = np.array(v, dtype=np.float64, copy=True)
    flip = np.zeros(v.shape[0], dtype=bool)
    undecided = np.ones(v.shape[0], dtype=bool)
    for axis in (2, 1, 0):
        comp = v[:, axis]
        decided = undecided & (np.abs(comp) > eps)
        flip |= decided & (comp < 0)
        undecided &= ~decided
    v[flip] *= -1.0
    return v


def voxel_downsample(cloud: PointCloud, size: float):
    """Replace the points of each occupied voxel by their centroid.

    Returns the downsampled cloud and an N-vector mapping each original point
    to the row of its voxel's representative. Voxels are ordered by the first
    point that falls into them.
    """
    if not size > 0:
        raise ValueError(f"voxel size must be > 0, got {size}")
    keys = np.floor(cloud.positions / size).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    rank = np.empty_like(first)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    mapping = rank[inverse]
    m = first.size
    counts = np.bincount(mapping, minlength=m).astype(np.float64)[:, None]
    pos = np.zeros((m, 3))
    col = np.zeros((m, 3))
    np.add.at(pos, mapping, cloud.positions)
    np.add.at(col, mapping, cloud.colors)
    col = np.clip(col / counts, 0.0, 1.0)
    return PointCloud(cloud.scene_id, pos / counts, col), mapping


def estimate_normals(cloud: PointCloud, knn: int) -> Normals:
    """PCA normals from the knn-point neighborhood (the point itself included).

    ``curvature`` is the surface variation l0 / (l0 + l1 + l2). Neighborhoods of
    rank < 2 get ``valid = False``.
    """
    n = cloud.n_points
    if knn < 3:
        raise ValueError(f"knn must be >= 3, got {knn}")
    if n <= knn:
        raise ValueError(f"need N > knn, got N={n}, knn={knn}")
    pos = cloud.positions
    _, idx = cKDTree(pos).query(pos, k=knn)
    nb = pos[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / knn
    evals, evecs = np.linalg.eigh(cov)
    normals = _canonical_sign(evecs[:, :, 0])
    total = evals.sum(axis=1)
    valid = (evals[:, 2] > 0) & (evals[:, 1] > 1e-10 * evals[:, 2])
    with np.errstate(invalid="ignore", divide="ignore"):
        curv = np.where(total > 0, evals[:, 0] / total, 1.0)
    curv = np.clip(curv, 0.0, None)
    return Normals(normals, valid, curv)


def neighbor_edges(positions: np.ndarray, k: int, radius: float):
    """Symmetric kNN graph edges (i < j) capped at ``radius``."""
    n = positions.shape[0]
    k = min(k + 1, n)
    if k < 2:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    dist, idx = cKDTree(positions).query(positions, k=k, distance_upper_bound=radius)
    src = np.repeat(np.arange(n), k - 1)
    dst = idx[:, 1:].reshape(-1)
    ok = np.isfinite(dist[:, 1:].reshape(-1)) & (dst < n)
    src, dst = src[ok], dst[ok]
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    pairs = np.unique(np.stack([lo, hi], axis=1), axis=0)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return pairs[:, 0], pairs[:, 1]


def _adjacency(n, ei, ej):
    nbrs = [[] for _ in range(n)]
    for a, b in zip(ei.tolist(), ej.tolist()):
        nbrs[a].append(b)
        nbrs[b].append(a)
    return [sorted(x) for x in nbrs]


def _dense_by_first(labels: np.ndarray) -> np.ndarray:
    """Relabel to 0..M-1 in order of first occurrence."""
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty_like(first)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inv.reshape(-1)]


def _merge_small(labels, ei, ej, min_size, group=None):
    """Merge regions below ``min_size`` into the adjacent region sharing the most edges.

    Smallest regions go first (ties: lowest ID); the receiving region is the
    neighbor with most connecting edges (ties: lowest ID). With ``group``, only
    regions of the same group may merge. Isolated small regions are kept.
    """
    labels = _dense_by_first(labels)
    r = int(labels.max()) + 1
    if r == 1 or ei.size == 0:
        return labels
    li, lj = labels[ei], labels[ej]
    keep = li != lj
    if group is not None:
        keep &= group[ei] == group[ej]
    w = coo_matrix((np.ones(int(keep.sum())), (li[keep], lj[keep])), shape=(r, r)).toarray()
    w = w + w.T
    sizes = np.bincount(labels, minlength=r).astype(np.int64)
    target = np.arange(r)
    alive = np.ones(r, dtype=bool)
    while True:
        cand = np.flatnonzero(alive & (sizes < min_size) & (w.sum(axis=1) > 0))
        if cand.size == 0:
            break
        s = cand[np.lexsort((cand, sizes[cand]))[0]]
        t = int(np.argmax(w[s]))
        w[t] += w[s]
        w[:, t] += w[:, s]
        w[t, t] = 0
        w[s] = 0
        w[:, s] = 0
        sizes[t] += sizes[s]
        sizes[s] = 0
        alive[s] = False
        target[target == s] = t
    return _dense_by_first(target[labels])


def region_grow(cloud: PointCloud, normals: Normals, config: InitConfig) -> SuperpointPartition:
    """Normal-based region growing over a radius-capped kNN graph.

    Seeds are taken in ascending point index among "core" points (valid normal,
    curvature at or below ``config.curvature_threshold``). A core neighbor joins
    when its normal is within ``angle_threshold`` of the current point's normal
    (normals are unoriented). Remaining points are attached to the region of
    their closest labeled graph neighbor, spreading outwards; points never
    reached form their own connected regions. Regions below
    ``min_region_size`` are then merged into their best-connected neighbor.
    """
    n = cloud.n_points
    vec = normals.vectors
    if normals.valid.mean() < 0.5:
        raise ValueError("region growing needs valid normals for >= 50% of points")
    pos = cloud.positions
    ei, ej = neighbor_edges(pos, config.neighbor_knn, config.graph_radius)
    nbrs = _adjacency(n, ei, ej)
    core = normals.valid & (normals.curvature <= config.curvature_threshold)
    cos_thr = np.cos(np.deg2rad(config.angle_threshold))

    labels = np.full(n, -1, dtype=np.int64)
    next_id = 0
    for seed in np.flatnonzero(core):
        if labels[seed] >= 0:
            continue
        labels[seed] = next_id
        queue = deque([seed])
        while queue:
            i = queue.popleft()
            for j in nbrs[i]:
                if labels[j] < 0 and core[j] and abs(vec[i] @ vec[j]) >= cos_thr:
                    labels[j] = next_id
                    queue.append(j)
        next_id += 1

    # attach non-core points outward from labeled ones, one graph hop per pass
    frontier = True
    while frontier and (labels < 0).any():
        frontier = False
        pending = np.flatnonzero(labels < 0)
        update = {}
        for i in pending:
            best, best_d = -1, np.inf
            for j in nbrs[i]:
                if labels[j] >= 0:
                    d = float(np.sum((pos[i] - pos[j]) ** 2))
                    if d < best_d:
                        best, best_d = j, d
            if best >= 0:
                update[i] = labels[best]
        for i, lab in update.items():
            labels[i] = lab
            frontier = True
    rest = labels < 0
    if rest.any():
        # unreachable points: connected components among themselves
        keep = rest[ei] & rest[ej]
        g = coo_matrix((np.ones(int(keep.sum())), (ei[keep], ej[keep])), shape=(n, n))
        _, comp = connected_components(g, directed=False)
        labels[rest] = next_id + _dense_by_first(comp[rest])

    labels = _merge_small(labels, ei, ej, config.min_region_size)
    return SuperpointPartition(cloud.scene_id, labels, level=0)


def split_by_resolution(cloud: PointCloud, partition: SuperpointPartition, resolution: float,
                        config: InitConfig) -> SuperpointPartition:
    """Cut each region along a cubic seed grid of side ``resolution``.

    Pieces are connected components of (region, cell) under the neighbor
    graph; pieces below ``min_region_size`` rejoin an adjacent piece of the
    same region.
    """
    if not resolution > 0:
        raise ValueError("resolution must be > 0")
    pos = cloud.positions
    n = cloud.n_points
    region = partition.point_to_sp
    cell = np.floor(pos / resolution).astype(np.int64)
    key = _dense_by_first(np.unique(np.column_stack([region, cell]), axis=0, return_inverse=True)[1].reshape(-1))
    ei, ej = neighbor_edges(pos, config.neighbor_knn, config.graph_radius)
    same = key[ei] == key[ej]
    g = coo_matrix((np.ones(int(same.sum())), (ei[same], ej[same])), shape=(n, n))
    _, comp = connected_components(g, directed=False)
    pieces = _merge_small(comp, ei, ej, config.min_region_size, group=region)
    return SuperpointPartition(cloud.scene_id, pieces, level=0)


def ransac_plane(positions, distance: float, iters: int, rng_seed: int = 42) -> PlaneModel:
    """Largest-consensus plane from random 3-point samples, refit by total least squares.

    Inliers are points with ``|n.x + offset| <= distance``. Samples with
    repeated or collinear points are skipped; the first hypothesis with the
    maximum inlier count wins.
    """
    pos = positions.positions if isinstance(positions, PointCloud) else np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if n < 3:
        raise ValueError(f"RANSAC needs N >= 3 points, got {n}")
    if not distance > 0:
        raise ValueError("distance must be > 0")
    rng = np.random.default_rng(rng_seed)
    samples = rng.integers(0, n, size=(iters, 3))
    scale = max(float(np.ptp(pos, axis=0).max()), 1e-12)
    best_count, best = -1, None
    for start in range(0, iters, 64):
        s = samples[start:start + 64]
        a, b, c = pos[s[:, 0]], pos[s[:, 1]], pos[s[:, 2]]
        nrm = np.cross(b - a, c - a)
        norm = np.linalg.norm(nrm, axis=1)
        ok = norm > 1e-9 * scale * scale
        if not ok.any():
            continue
        nrm = nrm[ok] / norm[ok, None]
        off = -np.einsum("ij,ij->i", nrm, a[ok])
        counts = (np.abs(pos @ nrm.T + off) <= distance).sum(axis=0)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count, best = int(counts[j]), (nrm[j], off[j])
    if best is None:
        raise ValueError(f"all {iters} RANSAC samples were degenerate (collinear or repeated points)")
    normal, offset = best
    inl = np.abs(pos @ normal + offset) <= distance
    if inl.sum() >= 3:
        pts = pos[inl]
        centroid = pts.mean(axis=0)
        _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
        refit = vt[-1] / np.linalg.norm(vt[-1])
        refit_off = -float(refit @ centroid)
        if (np.abs(pos @ refit + refit_off) <= distance).sum() >= inl.sum():
            normal, offset = refit, refit_off
    canon = _canonical_sign(normal[None, :])[0]
    if canon @ normal < 0:
        offset = -offset
    normal, offset = canon, float(offset)
    inl = np.abs(pos @ normal + offset) <= distance
    return PlaneModel(normal, offset, np.flatnonzero(inl))


def euclidean_cluster(cloud, remaining_ids, distance: float, scene_id: str | None = None) -> SuperpointPartition:
    """Connected components of ``remaining_ids`` under the "closer than distance" relation.

    Points outside ``remaining_ids`` (the ground plane) form one dedicated
    superpoint. IDs are ordered by each group's smallest point index.
    """
    if not distance > 0:
        raise ValueError("distance must be > 0")
    pos = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    sid = scene_id or (cloud.scene_id if isinstance(cloud, PointCloud) else "")
    n = pos.shape[0]
    rem = np.unique(np.asarray(remaining_ids, dtype=np.int64))
    labels = np.full(n, -1, dtype=np.int64)
    if rem.size:
        sub = pos[rem]
        pairs = cKDTree(sub).query_pairs(distance, output_type="ndarray")
        if pairs.size:
            d = np.linalg.norm(sub[pairs[:, 0]] - sub[pairs[:, 1]], axis=1)
            pairs = pairs[d < distance]
        g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(rem.size, rem.size))
        _, comp = connected_components(g, directed=False)
        labels[rem] = comp
    plane = labels < 0
    if plane.any():
        labels[plane] = labels.max() + 1
    return SuperpointPartition(sid, _dense_by_first(labels), level=0)


def init_superpoints(cloud: PointCloud, config: InitConfig) -> SuperpointPartition:
    """Level-0 superpoints for one scene; the count M0 differs per scene."""
    if config.mode == "outdoor":
        plane = ransac_plane(cloud.positions, config.ransac_distance, config.ransac_iters, config.seed)
        remaining = np.setdiff1d(np.arange(cloud.n_points), plane.inlier_ids)
        part = euclidean_cluster(cloud, remaining, config.cluster_distance)
    else:
        down, vmap = voxel_downsample(cloud, config.voxel_size)
        knn = min(config.normal_knn, down.n_points - 1)
        if knn < 3:
            part = SuperpointPartition(cloud.scene_id, np.zeros(cloud.n_points, dtype=np.int64))
            log.info("%s: too few voxels for normals, single superpoint", cloud.scene_id)
            return part
        normals = estimate_normals(down, knn)
        coarse = region_grow(down, normals, config)
        if config.voxel_resolution is not None:
            coarse = split_by_resolution(down, coarse, config.voxel_resolution, config)
        part = SuperpointPartition(cloud.scene_id, _dense_by_first(coarse.point_to_sp[vmap]), level=0)
    log.info("%s: %d initial superpoints", cloud.scene_id, part.n_superpoints)
    return part

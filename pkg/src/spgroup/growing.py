"""Bottom-up superpoint growing: mean features per superpoint and per-scene K-means merges."""
from __future__ import annotations

import numpy as np

from .data import FeatureSet, SuperpointPartition
from .kmeans import KMeansConfig, _assign, kmeans_fit


def growth_schedule(m1: int, mT: int, rounds: int) -> list[int]:
    """Superpoint targets per round, stepping evenly from ``m1`` down to ``mT``.

    Integer steps of ``(m1 - mT) // (rounds - 1)``; the last step absorbs the
    remainder, e.g. ``(10, 3, 4) -> [10, 8, 6, 3]``.
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    if mT < 1 or m1 < mT:
        raise ValueError(f"need m1 >= mT >= 1, got m1={m1}, mT={mT}")
    if rounds == 1:
        if m1 != mT:
            raise ValueError("a single round requires m1 == mT")
        return [m1]
    step = (m1 - mT) // (rounds - 1)
    return [m1 - i * step for i in range(rounds - 1)] + [mT]


def superpoint_mean_features(point_features: FeatureSet, partition: SuperpointPartition) -> FeatureSet:
    """Average of the valid point rows in each superpoint.

    Sums run in ascending point index. Superpoints without a single valid
    point come back with ``valid_mask = False`` and zero features.
    """
    if point_features.rows != partition.n_points:
        raise ValueError(f"feature rows {point_features.rows} != partition points {partition.n_points}")
    m = partition.n_superpoints
    valid = point_features.valid_mask
    ids = partition.point_to_sp[valid]
    x = np.asarray(point_features.values, dtype=np.float64)[valid]
    order = np.argsort(ids, kind="stable")
    counts = np.bincount(ids, minlength=m)
    out = np.zeros((m, point_features.dim))
    bounds = np.concatenate([[0], np.cumsum(counts)])
    for s in np.flatnonzero(counts):
        out[s] = x[order[bounds[s]:bounds[s + 1]]].sum(axis=0) / counts[s]
    return FeatureSet(out, counts > 0)


def superpoint_centroids(positions: np.ndarray, partition: SuperpointPartition) -> np.ndarray:
    m = partition.n_superpoints
    sums = np.zeros((m, 3))
    np.add.at(sums, partition.point_to_sp, positions)
    return sums / partition.sizes()[:, None]


def grow_superpoints(sp_features: FeatureSet, partition: SuperpointPartition, target_m: int,
                     kmeans_cfg: KMeansConfig | None = None, positions: np.ndarray | None = None,
                     n_jobs: int = 1) -> SuperpointPartition:
    """Merge a scene's superpoints into ``min(target_m, M)`` groups by K-means on their features.

    Superpoints with invalid features do not take part in clustering; they
    join the group whose geometric centroid is closest to theirs, which needs
    ``positions``. New IDs are ordered by first occurrence over old IDs.
    """
    if target_m < 1:
        raise ValueError(f"target_m must be >= 1, got {target_m}")
    m = partition.n_superpoints
    if sp_features.rows != m:
        raise ValueError(f"{sp_features.rows} feature rows for {m} superpoints")
    valid = sp_features.valid_mask
    n_valid = int(valid.sum())
    if target_m >= m or n_valid == 0:
        return partition.coarsen(np.arange(m))

    k = min(target_m, n_valid)
    cfg = kmeans_cfg or KMeansConfig(k)
    cfg = KMeansConfig(k, cfg.max_iters, cfg.tol, cfg.rng_seed, cfg.restarts)
    res = kmeans_fit(sp_features.values[valid], cfg, n_jobs=n_jobs)
    mapping = np.full(m, -1, dtype=np.int64)
    mapping[valid] = res.assignments
    if n_valid < m:
        if positions is None:
            raise ValueError("positions are required to place superpoints without valid features")
        cent = superpoint_centroids(positions, partition)
        groups = np.zeros((k, 3))
        np.add.at(groups, res.assignments, cent[valid] * partition.sizes()[valid, None])
        weight = np.bincount(res.assignments, weights=partition.sizes()[valid], minlength=k)
        groups /= weight[:, None]
        mapping[~valid] = _assign(cent[~valid], groups)[0]
    _, first, inv = np.unique(mapping, return_index=True, return_inverse=True)
    rank = np.empty_like(first)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return partition.coarsen(rank[inv.reshape(-1)])

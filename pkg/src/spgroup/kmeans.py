"""Deterministic Lloyd K-means with k-means++ seeding.

Every reduction runs in a fixed order so that results are bit-identical for a
given seed no matter how many workers compute the assignment step.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

DEFAULT_SEED = 42
_CHUNK = 2048


@dataclass(frozen=True)
class KMeansConfig:
    k: int
    max_iters: int = 300
    tol: float = 1e-6
    rng_seed: int = DEFAULT_SEED
    restarts: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise ValueError(f"tol must be >= 0, got {self.tol}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")


@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: float
    iters_run: int
    history: tuple = ()


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # explicit differences, not the |x|^2 - 2xc + |c|^2 expansion, so each row's
    # result is independent of how the rows are chunked
    out = np.empty((x.shape[0], c.shape[0]))
    for j in range(c.shape[0]):
        d = x - c[j]
        out[:, j] = np.einsum("ij,ij->i", d, d)
    return out


def _assign(x: np.ndarray, c: np.ndarray, n_jobs: int = 1):
    """Nearest centroid per row (ties to the lowest index) and its squared distance."""

    def block(sl):
        d = _sq_dists(x[sl], c)
        a = np.argmin(d, axis=1)
        return a, d[np.arange(a.size), a]

    n = x.shape[0]
    slices = [slice(i, min(i + _CHUNK, n)) for i in range(0, n, _CHUNK)]
    if n_jobs > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(block, slices))
    else:
        parts = [block(sl) for sl in slices]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _objective(dist: np.ndarray) -> float:
    return float(np.sum(dist))


def kmeans_init(data, k: int, rng_seed: int = DEFAULT_SEED) -> np.ndarray:
    """k-means++ seeding: uniform first pick, then D^2-weighted picks."""
    x = np.asarray(data, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} rows, got {n}")
    rng = np.random.default_rng(rng_seed)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            cdf = np.cumsum(closest)
            idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            idx = min(idx, n - 1)
            while closest[idx] == 0:  # guards the r*total == cdf boundary case
                idx -= 1
        else:
            # all remaining rows coincide with a chosen centroid
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rest[rng.integers(rest.size)])
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[idx][None, :])[:, 0])
    return x[chosen].copy()


def _update(x, assign, centroids, dist):
    k = centroids.shape[0]
    new = np.empty_like(centroids)
    counts = np.bincount(assign, minlength=k)
    order = np.argsort(assign, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    for j in range(k):
        if counts[j]:
            members = order[bounds[j]:bounds[j + 1]]  # ascending point index
            new[j] = x[members].sum(axis=0) / counts[j]
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        # reseed each empty cluster with the point farthest from its centroid,
        # never emptying a singleton cluster in the process
        counts = counts.copy()
        cand = iter(np.argsort(-dist, kind="stable"))
        for j in empty:
            for i in cand:
                if counts[assign[i]] > 1:
                    counts[assign[i]] -= 1
                    new[j] = x[i]
                    break
    return new


def _lloyd(x, init, max_iters, tol, n_jobs):
    centroids = init
    assign, dist = _assign(x, centroids, n_jobs)
    obj = _objective(dist)
    history = [obj]
    it = 0
    for it in range(1, max_iters + 1):
        centroids = _update(x, assign, centroids, dist)
        new_assign, dist = _assign(x, centroids, n_jobs)
        new_obj = _objective(dist)
        history.append(new_obj)
        changed = not np.array_equal(new_assign, assign)
        assign = new_assign
        rel = abs(obj - new_obj) / obj if obj > 0 else 0.0
        obj = new_obj
        if not changed or rel <= tol:
            break
    # final repair pass so that no cluster is left empty
    k = centroids.shape[0]
    if np.bincount(assign, minlength=k).min() == 0:
        centroids = _update(x, assign, centroids, dist)
        assign, dist = _assign(x, centroids, n_jobs)
        counts = np.bincount(assign, minlength=k)
        if counts.min() == 0:
            # fewer distinct rows than clusters: the lowest-index tie rule would
            # pull duplicates back, so hand them over explicitly (distance 0)
            assign, dist, centroids = assign.copy(), dist.copy(), centroids.copy()
            donors = iter(np.argsort(-dist, kind="stable"))
            for j in np.flatnonzero(counts == 0):
                for i in donors:
                    if counts[assign[i]] > 1:
                        counts[assign[i]] -= 1
                        counts[j] += 1
                        assign[i], dist[i] = j, 0.0
                        centroids[j] = x[i]
                        break
        obj = _objective(dist)
        history.append(obj)
    return assign, centroids, obj, it, tuple(history)


def kmeans_fit(data, config: KMeansConfig, n_jobs: int = 1) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; best of ``config.restarts`` runs."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"data must be 2-D, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("data contains non-finite values")
    if x.shape[0] < config.k:
        raise ValueError(f"need at least k={config.k} rows, got {x.shape[0]}")
    best = None
    for r in range(config.restarts):
        init = kmeans_init(x, config.k, config.rng_seed + r)
        res = _lloyd(x, init, config.max_iters, config.tol, n_jobs)
        if best is None or res[2] < best[2]:
            best = res
    assign, centroids, obj, it, history = best
    return KMeansResult(assign, centroids, obj, it, history)


class KMeans(ClusterMixin, TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`kmeans_fit`.

    Parameters
    ----------
    n_clusters : int
    max_iter : int
        Lloyd iteration budget.
    tol : float
        Stop when the relative objective change drops to ``tol`` or below.
    n_init : int
        Restarts; restart ``r`` seeds with ``random_state + r`` and the lowest
        objective wins (ties go to the earliest restart).
    random_state : int
    n_jobs : int
        Threads for the assignment step. Never changes the result.
    """

    def __init__(self, n_clusters=8, *, max_iter=300, tol=1e-6, n_init=1,
                 random_state=DEFAULT_SEED, n_jobs=1):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self):
        return KMeansConfig(self.n_clusters, self.max_iter, self.tol,
                            self.random_state, self.n_init)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        res = kmeans_fit(X, self._config(), n_jobs=self.n_jobs)
        self.labels_ = res.assignments
        self.cluster_centers_ = res.centroids
        self.inertia_ = res.objective
        self.n_iter_ = res.iters_run
        self.objective_history_ = np.asarray(res.history)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return _assign(X, self.cluster_centers_, self.n_jobs)[0]

    def transform(self, X):
        """Squared distances to each centroid."""
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return _sq_dists(X, self.cluster_centers_)

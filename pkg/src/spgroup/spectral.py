"""Top-down pseudo-labels from the spectrum of a global superpoint graph.

Every superpoint of the dataset becomes a node. Edge weights are
``exp(-beta * ||f_i - f_j||_2)``; the eigenvectors of the symmetric normalized
Laplacian act as global patterns. Superpoint features are moved into that
basis (graph Fourier transform), patterns whose frequency rows cluster
together are averaged, and the superpoints are finally clustered on their
rows of the averaged pattern matrix.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import IGNORE, FeatureSet, SuperpointPartition
from .kmeans import DEFAULT_SEED, KMeansConfig, kmeans_fit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GlobalGraph:
    adjacency: np.ndarray
    degrees: np.ndarray
    node_index: tuple = ()

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]


@dataclass(frozen=True)
class GlobalPatternBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    pattern_assignments: np.ndarray
    patterns: np.ndarray

    @property
    def s_prime(self) -> int:
        return self.patterns.shape[1]


def build_global_graph(features, node_index=None, bandwidth: float = 1.0) -> GlobalGraph:
    """Dense adjacency ``a_ij = exp(-bandwidth * ||f_i - f_j||_2)``.

    ``node_index`` lists ``(scene_id, local_id)`` per row; it is used to name
    the offending superpoint when a row is invalid.
    """
    if isinstance(features, FeatureSet):
        values, valid = features.values, features.valid_mask
    else:
        values = np.asarray(features)
        valid = np.ones(values.shape[0], dtype=bool)
    x = np.asarray(values, dtype=np.float64)
    bad = ~valid | ~np.isfinite(x).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        where = f"scene {node_index[i][0]!r}, superpoint {node_index[i][1]}" if node_index else f"row {i}"
        raise ValueError(f"invalid superpoint feature at {where}")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be > 0")
    if x.shape[0] == 1:
        adj = np.ones((1, 1))
    else:
        adj = squareform(np.exp(-bandwidth * pdist(x)))
        np.fill_diagonal(adj, 1.0)
    return GlobalGraph(adj, adj.sum(axis=1), tuple(node_index or ()))


def normalized_laplacian(graph) -> np.ndarray:
    """``D^-1/2 (D - A) D^-1/2`` with D the diagonal of row sums, symmetrized exactly."""
    adj = graph.adjacency if isinstance(graph, GlobalGraph) else np.asarray(graph, dtype=np.float64)
    deg = adj.sum(axis=1)
    if (deg <= 0).any():
        raise ValueError("all node degrees must be positive")
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = (np.diag(deg) - adj) * inv_sqrt[:, None] * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def eigendecompose(lap, sym_tol: float = 1e-9):
    """Ascending eigenvalues and orthonormal eigenvectors (columns) of a symmetric matrix.

    Each column is flipped so its largest-magnitude entry is positive; on equal
    magnitudes the lowest index decides.
    """
    lap = np.asarray(lap, dtype=np.float64)
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
        raise ValueError(f"matrix must be square, got {lap.shape}")
    asym = np.abs(lap - lap.T).max() if lap.size else 0.0
    if asym > sym_tol:
        raise ValueError(f"matrix is not symmetric (max |L - L^T| = {asym:.3e})")
    try:
        evals, evecs = np.linalg.eigh(0.5 * (lap + lap.T))
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigensolver did not converge: {exc}") from None
    pivot = np.argmax(np.abs(evecs), axis=0)
    signs = np.where(evecs[pivot, np.arange(evecs.shape[1])] < 0, -1.0, 1.0)
    return evals, evecs * signs


def gft(eigenvectors: np.ndarray, sp_features) -> np.ndarray:
    """Frequency-domain features ``U^T F``; row s pairs with pattern s."""
    f = sp_features.values if isinstance(sp_features, FeatureSet) else sp_features
    f = np.asarray(f, dtype=np.float64)
    u = np.asarray(eigenvectors, dtype=np.float64)
    if u.shape[0] != f.shape[0]:
        raise ValueError(f"basis has {u.shape[0]} rows but features have {f.shape[0]}")
    return u.T @ f


def inverse_gft(eigenvectors: np.ndarray, freq: np.ndarray) -> np.ndarray:
    return np.asarray(eigenvectors) @ np.asarray(freq)


def group_patterns(eigenvectors: np.ndarray, freq: np.ndarray, s_prime: int,
                   kmeans_cfg: KMeansConfig | None = None, n_jobs: int = 1):
    """Cluster frequency rows into ``s_prime`` groups and average each group's eigenvectors.

    Returns ``(assignments, V)``; group IDs, and therefore the columns of V,
    are ordered by the smallest eigenvalue index they contain.
    """
    u = np.asarray(eigenvectors, dtype=np.float64)
    s = u.shape[1]
    if not 1 <= s_prime <= s:
        raise ValueError(f"s_prime must lie in [1, {s}], got {s_prime}")
    base = kmeans_cfg or KMeansConfig(s_prime)
    cfg = KMeansConfig(s_prime, base.max_iters, base.tol, base.rng_seed, base.restarts)
    raw = kmeans_fit(freq, cfg, n_jobs=n_jobs).assignments
    # relabel by first occurrence in ascending eigen-index order
    _, first, inv = np.unique(raw, return_index=True, return_inverse=True)
    rank = np.empty_like(first)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    assign = rank[inv.reshape(-1)]
    v = np.zeros((u.shape[0], s_prime))
    for g in range(s_prime):
        members = np.flatnonzero(assign == g)
        v[:, g] = u[:, members].sum(axis=1) / members.size
    return assign, v


def superpoint_pseudo_labels(patterns: np.ndarray, n_classes: int,
                             kmeans_cfg: KMeansConfig | None = None, n_jobs: int = 1) -> np.ndarray:
    """K-means over the rows of V: one class per superpoint, all classes used."""
    v = np.asarray(patterns, dtype=np.float64)
    if not 1 <= n_classes <= v.shape[0]:
        raise ValueError(f"n_classes must lie in [1, {v.shape[0]}], got {n_classes}")
    base = kmeans_cfg or KMeansConfig(n_classes)
    cfg = KMeansConfig(n_classes, base.max_iters, base.tol, base.rng_seed, base.restarts)
    return kmeans_fit(v, cfg, n_jobs=n_jobs).assignments


def expand_labels_to_points(sp_labels, partitions, excluded=None) -> dict:
    """Per-point labels per scene from labels over the concatenated superpoints.

    ``sp_labels`` runs over scenes in the order of ``partitions`` and local
    IDs within each. ``excluded`` optionally maps scene_id to a boolean mask of
    points dropped at ingestion; those get -1.
    """
    sp_labels = np.asarray(sp_labels, dtype=np.int64)
    total = sum(p.n_superpoints for p in partitions)
    if sp_labels.shape[0] != total:
        raise ValueError(f"{sp_labels.shape[0]} superpoint labels for {total} superpoints")
    out, offset = {}, 0
    for part in partitions:
        local = sp_labels[offset:offset + part.n_superpoints]
        if (local < 0).any():
            bad = int(np.flatnonzero(local < 0)[0])
            raise ValueError(f"unlabeled superpoint {bad} in scene {part.scene_id!r}")
        labels = local[part.point_to_sp]
        if excluded is not None and part.scene_id in excluded:
            labels = np.where(excluded[part.scene_id], IGNORE, labels)
        out[part.scene_id] = labels
        offset += part.n_superpoints
    return out


class GlobalPatternGrouping(ClusterMixin, BaseEstimator):
    """Cluster superpoints through grouped Laplacian eigenvectors.

    ``fit(X)`` takes the S x D matrix of superpoint features of the whole
    dataset and sets ``labels_`` (S class IDs) together with the intermediate
    spectral quantities.

    Parameters
    ----------
    n_patterns : int
        Number of grouped global patterns (columns of V).
    n_classes : int
    bandwidth : float
        Scale inside the edge-weight exponential; 1 reproduces the plain form.
    max_iter, tol, n_init, random_state, n_jobs
        Forwarded to both K-means stages.

    Attributes
    ----------
    adjacency_, laplacian_ : (S, S) arrays
    eigenvalues_ : (S,) ascending
    eigenvectors_ : (S, S), columns are the global patterns
    frequency_features_ : (S, D)
    pattern_labels_ : (S,) group of each eigenvector
    patterns_ : (S, n_patterns) grouped patterns V
    labels_ : (S,) class of each superpoint
    """

    def __init__(self, n_patterns=50, n_classes=20, *, bandwidth=1.0, max_iter=300, tol=1e-6,
                 n_init=1, random_state=DEFAULT_SEED, n_jobs=1, keep_graph=False):
        self.n_patterns = n_patterns
        self.n_classes = n_classes
        self.bandwidth = bandwidth
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.random_state = random_state
        self.n_jobs = n_jobs
        self.keep_graph = keep_graph

    def fit(self, X, y=None, node_index=None):
        if isinstance(X, FeatureSet):
            graph = build_global_graph(X, node_index, self.bandwidth)
            X = np.asarray(X.values, dtype=np.float64)
        else:
            X = check_array(X, dtype=np.float64)
            graph = build_global_graph(X, node_index, self.bandwidth)
        s = X.shape[0]
        cfg = KMeansConfig(1, self.max_iter, self.tol, self.random_state, self.n_init)
        lap = normalized_laplacian(graph)
        evals, evecs = eigendecompose(lap)
        freq = gft(evecs, X)
        assign, v = group_patterns(evecs, freq, min(self.n_patterns, s), cfg, self.n_jobs)
        self.labels_ = superpoint_pseudo_labels(v, min(self.n_classes, s), cfg, self.n_jobs)
        if self.keep_graph:
            self.adjacency_ = graph.adjacency
            self.laplacian_ = lap
        self.eigenvalues_ = evals
        self.eigenvectors_ = evecs
        self.frequency_features_ = freq
        self.pattern_labels_ = assign
        self.patterns_ = v
        self.n_features_in_ = X.shape[1]
        return self

    def fit_predict(self, X, y=None, node_index=None):
        return self.fit(X, node_index=node_index).labels_

    @property
    def basis_(self) -> GlobalPatternBasis:
        check_is_fitted(self, "patterns_")
        return GlobalPatternBasis(self.eigenvalues_, self.eigenvectors_, self.pattern_labels_, self.patterns_)


def stack_superpoint_features(per_scene: list[FeatureSet], partitions: list[SuperpointPartition]):
    """Concatenate per-scene superpoint features in scene order, with the node index."""
    rows, masks, index = [], [], []
    for feats, part in zip(per_scene, partitions):
        if feats.rows != part.n_superpoints:
            raise ValueError(f"scene {part.scene_id!r}: {feats.rows} feature rows for {part.n_superpoints} superpoints")
        rows.append(np.asarray(feats.values, dtype=np.float64))
        masks.append(feats.valid_mask)
        index.extend((part.scene_id, i) for i in range(part.n_superpoints))
    return FeatureSet(np.vstack(rows), np.concatenate(masks)), index

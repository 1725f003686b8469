"""End-to-end orchestration: superpoints, growth rounds and global pseudo-labels.

Network retraining between rounds is not part of this package. Instead each
round may read a fresh set of per-point features (``per_round_feature_dirs``);
without them the ingested features are reused in every round.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import FeatureSet, PointCloud, SuperpointPartition
from .geometry import InitConfig, init_superpoints
from .growing import grow_superpoints, growth_schedule, superpoint_centroids, superpoint_mean_features
from .io import (DatasetManifest, load_manifest, load_scene_cloud, read_feature_set, write_feature_set,
                 write_labels)
from .kmeans import DEFAULT_SEED, KMeansConfig
from .metrics import ConfusionMatrix, MetricReport, confusion_matrix, metrics_from_confusion, superpoint_purity
from .projection import CameraView, ProjectionConfig, aggregate_views
from .spectral import GlobalPatternGrouping, expand_labels_to_points, stack_superpoint_features

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class PipelineConfig:
    manifest: str | None = None
    out: str | None = None
    mode: str = "indoor"
    init: InitConfig = field(default_factory=InitConfig)
    projection: ProjectionConfig | None = None  # None: features are precomputed
    m1: int = 80
    mT: int = 40
    rounds: int = 5
    s_prime: int = 50
    classes: int = 20
    bandwidth: float = 1.0
    kmeans_max_iters: int = 300
    kmeans_tol: float = 1e-6
    kmeans_restarts: int = 1
    seed: int = DEFAULT_SEED
    per_round_feature_dirs: tuple = ()
    threads: int = 1
    dump_basis: bool = False

    def __post_init__(self):
        if self.init.mode != self.mode:
            object.__setattr__(self, "init", replace(self.init, mode=self.mode))
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def kmeans(self) -> KMeansConfig:
        return KMeansConfig(1, self.kmeans_max_iters, self.kmeans_tol, self.seed, self.kmeans_restarts)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        """Flat JSON keys; ``init`` and ``projection`` fields may also sit at top level."""
        doc = dict(doc)
        init_keys = {f.name for f in fields(InitConfig)}
        proj_keys = {f.name for f in fields(ProjectionConfig)}
        init = dict(doc.pop("init", {}) or {})
        for k in list(doc):
            if k in init_keys and k not in ("seed",):
                init[k] = doc.pop(k)
        if "resolution" in doc:
            init["voxel_resolution"] = doc.pop("resolution")
        proj = doc.pop("projection", None)
        if proj == "features-precomputed":
            proj = None
        proj = dict(proj) if isinstance(proj, dict) else ({} if proj else None)
        for k in list(doc):
            if k in proj_keys:
                proj = proj if proj is not None else {}
                proj[k] = doc.pop(k)
        mode = doc.get("mode", init.get("mode", "indoor"))
        init["mode"] = doc["mode"] = mode
        init.setdefault("seed", doc.get("seed", DEFAULT_SEED))
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "per_round_feature_dirs" in doc:
            doc["per_round_feature_dirs"] = tuple(doc["per_round_feature_dirs"] or ())
        return cls(init=InitConfig(**init), projection=None if proj is None else ProjectionConfig(**proj),
                   **{k: v for k, v in doc.items() if k not in ("init", "projection")})

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_round_feature_dirs"] = list(self.per_round_feature_dirs)
        return d


@dataclass
class PipelineResult:
    labels: dict
    partitions: list
    report: MetricReport | None = None
    rounds: list = field(default_factory=list)


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except (ValueError, RuntimeError, OSError, KeyError) as exc:
                raise StageError(name, str(exc)) from exc
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


def _pmap(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


@_stage("load")
def load_clouds(manifest: DatasetManifest, threads: int = 1) -> list[PointCloud]:
    return _pmap(load_scene_cloud, list(manifest.scenes), threads)


@_stage("features")
def load_features(manifest: DatasetManifest, clouds, config: PipelineConfig, feature_dir=None) -> list[FeatureSet]:
    out = []
    for entry, cloud in zip(manifest.scenes, clouds):
        if feature_dir is not None:
            fs = read_feature_set(Path(feature_dir) / f"{entry.scene_id}.feat")
        elif config.projection is not None and entry.views:
            views = [CameraView.from_json(v) for v in entry.views]
            fs = aggregate_views(cloud, views, config.projection)
        elif entry.features is not None:
            fs = read_feature_set(entry.features)
        else:
            raise ValueError(f"scene {entry.scene_id!r} has neither features nor camera views")
        if fs.rows != cloud.n_points:
            raise ValueError(f"scene {entry.scene_id!r}: {fs.rows} feature rows for {cloud.n_points} points")
        out.append(fs)
    return out


@_stage("init")
def initial_partitions(clouds, init: InitConfig, threads: int = 1) -> list[SuperpointPartition]:
    return _pmap(lambda c: init_superpoints(c, init), clouds, threads)


@_stage("grow")
def grow_all(clouds, features, partitions, target: int, kcfg: KMeansConfig, threads: int = 1):
    def one(args):
        cloud, feats, part = args
        spf = superpoint_mean_features(feats, part)
        return grow_superpoints(spf, part, target, kcfg, cloud.positions)
    return _pmap(one, list(zip(clouds, features, partitions)), threads)


def _fill_invalid(labels_valid, valid, clouds, partitions):
    """Label superpoints lacking features after their geometrically nearest labeled one in the scene."""
    labels = np.full(valid.shape[0], -1, dtype=np.int64)
    labels[valid] = labels_valid
    offset = 0
    for cloud, part in zip(clouds, partitions):
        sl = slice(offset, offset + part.n_superpoints)
        local, ok = labels[sl], valid[sl]
        if not ok.all():
            if not ok.any():
                raise ValueError(f"scene {part.scene_id!r} has no superpoint with valid features")
            cent = superpoint_centroids(cloud.positions, part)
            good = np.flatnonzero(ok)
            for i in np.flatnonzero(~ok):
                d = np.sum((cent[good] - cent[i]) ** 2, axis=1)
                local[i] = local[good[int(np.argmin(d))]]
        offset += part.n_superpoints
    return labels


@_stage("spectral")
def spectral_labels(clouds, features, partitions, config: PipelineConfig, dump_dir=None):
    """Pseudo-label every superpoint of the dataset; returns (per-superpoint labels, estimator)."""
    per_scene = [superpoint_mean_features(f, p) for f, p in zip(features, partitions)]
    stacked, index = stack_superpoint_features(per_scene, partitions)
    valid = stacked.valid_mask
    s = int(valid.sum())
    if s == 0:
        raise ValueError("no superpoint has valid features")
    est = GlobalPatternGrouping(
        n_patterns=min(config.s_prime, s), n_classes=min(config.classes, s), bandwidth=config.bandwidth,
        max_iter=config.kmeans_max_iters, tol=config.kmeans_tol, n_init=config.kmeans_restarts,
        random_state=config.seed, n_jobs=config.threads)
    node_index = [ix for ix, ok in zip(index, valid) if ok]
    est.fit(FeatureSet(stacked.values[valid]), node_index=node_index)
    if dump_dir is not None:
        dump = Path(dump_dir)
        dump.mkdir(parents=True, exist_ok=True)
        write_feature_set(FeatureSet(est.eigenvalues_[:, None]), dump / "eigenvalues.feat")
        write_feature_set(FeatureSet(est.eigenvectors_), dump / "U.feat")
        write_feature_set(FeatureSet(est.patterns_), dump / "V.feat")
        (dump / "node_index.json").write_text(json.dumps([[sid, int(i)] for sid, i in node_index]))
    return _fill_invalid(est.labels_, valid, clouds, partitions), est


def evaluate_scenes(labels: dict, clouds, n_classes: int) -> MetricReport | None:
    """Dataset-level confusion summed over scenes, then matched metrics."""
    gts = [c for c in clouds if c.gt_labels is not None]
    if not gts:
        return None
    n = max(n_classes, max(int(c.gt_labels.max()) + 1 for c in gts), 1)
    conf = ConfusionMatrix(np.zeros((n, n), dtype=np.int64), 0, np.zeros(n, dtype=np.int64))
    for c in gts:
        conf = conf + confusion_matrix(labels[c.scene_id], c.gt_labels, n)
    return metrics_from_confusion(conf)


def run_pipeline(config: PipelineConfig, manifest: DatasetManifest | None = None) -> PipelineResult:
    """Init superpoints, then per round: grow, build the global graph, label, expand to points."""
    if manifest is None:
        if config.manifest is None:
            raise StageError("config", "no manifest given")
        manifest = _stage("load")(load_manifest)(config.manifest)
    if config.per_round_feature_dirs and len(config.per_round_feature_dirs) != config.rounds:
        raise StageError("config", f"{len(config.per_round_feature_dirs)} feature dirs for {config.rounds} rounds")
    try:
        schedule = growth_schedule(config.m1, config.mT, config.rounds)
    except ValueError as exc:
        raise StageError("config", str(exc)) from exc
    out = Path(config.out) if config.out else None

    with threadpool_limits(limits=1):  # single-threaded BLAS keeps results bit-stable
        clouds = load_clouds(manifest, config.threads)
        features = load_features(manifest, clouds, config)
        partitions = initial_partitions(clouds, config.init, config.threads)
        base = [p.point_to_sp for p in partitions]
        rounds, labels = [], {}
        for r, target in enumerate(schedule):
            if config.per_round_feature_dirs:
                features = load_features(manifest, clouds, config, config.per_round_feature_dirs[r])
            partitions = grow_all(clouds, features, partitions, target, config.kmeans, config.threads)
            for b, p in zip(base, partitions):
                if not np.array_equal(p.replay(b), p.point_to_sp):
                    raise StageError("grow", f"coarsening history broken for scene {p.scene_id!r}")
            dump = out / "basis" / f"round_{r + 1}" if (out and config.dump_basis) else None
            sp_labels, est = spectral_labels(clouds, features, partitions, config, dump)
            labels = expand_labels_to_points(sp_labels, partitions)
            stats = {"round": r + 1, "target": target,
                     "superpoints": int(sum(p.n_superpoints for p in partitions)),
                     "s_prime": int(est.patterns_.shape[1]), "classes": int(est.labels_.max()) + 1}
            with_gt = [(c, p) for c, p in zip(clouds, partitions) if c.gt_labels is not None]
            if with_gt:
                stats["purity"] = float(np.mean([superpoint_purity(p, c.gt_labels, int(c.gt_labels.max()) + 1)
                                                 for c, p in with_gt if c.gt_labels.max() >= 0]))
            log.info("round %d: %s", r + 1, stats)
            rounds.append(stats)
        report = evaluate_scenes(labels, clouds, config.classes)

    result = PipelineResult(labels, partitions, report, rounds)
    if out is not None:
        write_outputs(result, clouds, base, out, config)
    return result


@_stage("write")
def write_outputs(result: PipelineResult, clouds, base, out: Path, config: PipelineConfig) -> None:
    (out / "labels").mkdir(parents=True, exist_ok=True)
    (out / "partitions").mkdir(parents=True, exist_ok=True)
    for cloud, part, b in zip(clouds, result.partitions, base):
        write_labels(result.labels[cloud.scene_id], out / "labels" / f"{cloud.scene_id}.pred.lbl")
        write_labels(b, out / "partitions" / f"{cloud.scene_id}.sp0.lbl")
        ids = np.asarray(b)
        for t, mapping in enumerate(part.history, start=1):
            ids = mapping[ids]
            write_labels(ids, out / "partitions" / f"{cloud.scene_id}.sp{t}.lbl")
    doc = {"config": config.to_dict(), "rounds": result.rounds,
           "metrics": result.report.to_dict() if result.report else None}
    (out / "report.json").write_text(json.dumps(doc, indent=2, default=str) + "\n")

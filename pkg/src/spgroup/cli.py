"""Command-line entry point: ``spgroup <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import SuperpointPartition
from .geometry import init_superpoints
from .io import load_manifest, read_labels, write_feature_set, write_labels
from .metrics import ConfusionMatrix, confusion_matrix, metrics_from_confusion
from .pipeline import (PipelineConfig, StageError, evaluate_scenes, grow_all, initial_partitions, load_clouds,
                       load_features, run_pipeline, spectral_labels)
from .growing import growth_schedule
from .projection import CameraView, ProjectionConfig, aggregate_views
from .spectral import expand_labels_to_points
from .synth import SynthConfig, synth_scenes

log = logging.getLogger("spgroup")


def _common(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=default, help="RNG seed for every random step")
    parser.add_argument("--threads", type=int, default=default if suppress else 1,
                        help="worker threads; never changes results")
    parser.add_argument("-v", "--verbose", action="store_true", default=default if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spgroup", description=__doc__)
    _common(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        _common(sp, suppress=True)
        return sp

    s = add("synth", "generate a synthetic labelled dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=20)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--objects", type=int, default=6)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--separation", type=float, default=10.0)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--spacing", type=float, default=0.05)

    s = add("init-superpoints", "initial superpoints per scene")
    s.add_argument("--manifest")
    s.add_argument("--mode", choices=("indoor", "outdoor"))
    s.add_argument("--resolution", type=float)
    s.add_argument("--out", required=True)

    s = add("project-features", "lift 2D feature maps onto points")
    s.add_argument("--manifest")
    s.add_argument("--tolerance", type=float)
    s.add_argument("--min-views", type=int)
    s.add_argument("--out", required=True)

    s = add("grow", "coarsen superpoints over the growth schedule")
    s.add_argument("--manifest")
    s.add_argument("--superpoints", required=True, help="dir with <scene>.sp0.lbl")
    s.add_argument("--features", help="dir with <scene>.feat (default: manifest features)")
    s.add_argument("--round-features", nargs="*", help="one feature dir per round")
    s.add_argument("--m1", type=int)
    s.add_argument("--mT", type=int)
    s.add_argument("--rounds", type=int)
    s.add_argument("--out", required=True)

    s = add("spectral-labels", "global-pattern pseudo-labels")
    s.add_argument("--manifest")
    s.add_argument("--superpoints", required=True)
    s.add_argument("--level", type=int, help="partition level to label (default: highest found)")
    s.add_argument("--features")
    s.add_argument("--s-prime", type=int)
    s.add_argument("--classes", type=int)
    s.add_argument("--bandwidth", type=float)
    s.add_argument("--dump-basis", action="store_true", help="also write eigenvalues, U and V")
    s.add_argument("--out", required=True)

    s = add("evaluate", "Hungarian-matched OA / mAcc / mIoU")
    s.add_argument("--pred", required=True, help="dir with <scene>.pred.lbl")
    s.add_argument("--gt", required=True, help="dir with <scene>.gt.lbl")
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--report")

    s = add("run", "full pipeline")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--mode", choices=("indoor", "outdoor"))
    s.add_argument("--resolution", type=float)
    s.add_argument("--m1", type=int)
    s.add_argument("--mT", type=int)
    s.add_argument("--rounds", type=int)
    s.add_argument("--s-prime", type=int)
    s.add_argument("--classes", type=int)
    s.add_argument("--round-features", nargs="*")
    s.add_argument("--dump-basis", action="store_true")
    return p


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    over = {}
    for key, attr in (("manifest", "manifest"), ("out", "out"), ("mode", "mode"), ("m1", "m1"), ("mT", "mT"),
                      ("rounds", "rounds"), ("s_prime", "s_prime"), ("classes", "classes"),
                      ("bandwidth", "bandwidth"), ("seed", "seed")):
        val = getattr(args, key, None)
        if val is not None:
            over[attr] = val
    if getattr(args, "round_features", None):
        over["per_round_feature_dirs"] = tuple(args.round_features)
    if getattr(args, "dump_basis", False):
        over["dump_basis"] = True
    over["threads"] = args.threads or cfg.threads
    init = cfg.init
    if getattr(args, "resolution", None) is not None:
        init = replace(init, voxel_resolution=args.resolution)
    if args.seed is not None:
        init = replace(init, seed=args.seed)
    return replace(cfg, init=init, **over)


def _manifest(cfg):
    if cfg.manifest is None:
        raise StageError("config", "--manifest is required (flag or config key)")
    return load_manifest(cfg.manifest)


def _level_files(directory: Path, scene_id: str, level):
    if level is not None:
        return directory / f"{scene_id}.sp{level}.lbl"
    found = sorted(directory.glob(f"{scene_id}.sp*.lbl"), key=lambda p: int(p.name.rsplit(".sp", 1)[1][:-4]))
    if not found:
        raise FileNotFoundError(f"no partition file for scene {scene_id!r} in {directory}")
    return found[-1]


def cmd_synth(args, cfg):
    sc = SynthConfig(args.scenes, args.classes, args.objects, args.dim, args.separation, args.noise,
                     args.spacing, cfg.seed)
    manifest = synth_scenes(sc, args.out)
    print(manifest)


def cmd_init(args, cfg):
    manifest = _manifest(cfg)
    clouds = load_clouds(manifest, cfg.threads)
    parts = initial_partitions(clouds, cfg.init, cfg.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for part in parts:
        write_labels(part.point_to_sp, out / f"{part.scene_id}.sp0.lbl")
        print(f"{part.scene_id}\t{part.n_superpoints}")


def cmd_project(args, cfg):
    proj = cfg.projection or ProjectionConfig()
    if args.tolerance is not None:
        proj = replace(proj, depth_tolerance=args.tolerance)
    if args.min_views is not None:
        proj = replace(proj, min_views=args.min_views)
    manifest = _manifest(cfg)
    clouds = load_clouds(manifest, cfg.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for entry, cloud in zip(manifest.scenes, clouds):
        if not entry.views:
            raise StageError("features", f"scene {entry.scene_id!r} has no camera views")
        try:
            fs = aggregate_views(cloud, [CameraView.from_json(v) for v in entry.views], proj)
        except ValueError as exc:
            raise StageError("features", str(exc)) from exc
        write_feature_set(fs, out / f"{entry.scene_id}.feat", with_mask=True)
        print(f"{entry.scene_id}\t{int(fs.valid_mask.sum())}/{fs.rows} points hit")


def _read_partitions(manifest, clouds, directory, level=None):
    parts = []
    for entry, cloud in zip(manifest.scenes, clouds):
        ids = read_labels(_level_files(Path(directory), entry.scene_id, level))
        if ids.shape[0] != cloud.n_points:
            raise StageError("load", f"scene {entry.scene_id!r}: partition has {ids.shape[0]} rows, cloud {cloud.n_points}")
        parts.append(SuperpointPartition(entry.scene_id, ids))
    return parts


def cmd_grow(args, cfg):
    manifest = _manifest(cfg)
    clouds = load_clouds(manifest, cfg.threads)
    parts = _read_partitions(manifest, clouds, args.superpoints, 0)
    schedule = growth_schedule(cfg.m1, cfg.mT, cfg.rounds)
    dirs = cfg.per_round_feature_dirs
    if dirs and len(dirs) != len(schedule):
        raise StageError("config", f"{len(dirs)} feature dirs for {len(schedule)} rounds")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    feats = load_features(manifest, clouds, cfg, args.features)
    for r, target in enumerate(schedule):
        if dirs:
            feats = load_features(manifest, clouds, cfg, dirs[r])
        parts = grow_all(clouds, feats, parts, target, cfg.kmeans, cfg.threads)
        for part in parts:
            write_labels(part.point_to_sp, out / f"{part.scene_id}.sp{r + 1}.lbl")
        print(f"round {r + 1}: target {target}, {sum(p.n_superpoints for p in parts)} superpoints")


def cmd_spectral(args, cfg):
    manifest = _manifest(cfg)
    clouds = load_clouds(manifest, cfg.threads)
    parts = _read_partitions(manifest, clouds, args.superpoints, args.level)
    feats = load_features(manifest, clouds, cfg, args.features)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sp_labels, est = spectral_labels(clouds, feats, parts, cfg, out / "basis" if cfg.dump_basis else None)
    labels = expand_labels_to_points(sp_labels, parts)
    write_labels(sp_labels, out / "superpoints.lbl")
    for sid, lab in labels.items():
        write_labels(lab, out / f"{sid}.pred.lbl")
    report = evaluate_scenes(labels, clouds, cfg.classes)
    print(f"S={sp_labels.size} S'={est.patterns_.shape[1]} C={int(est.labels_.max()) + 1}")
    if report is not None:
        print(f"mIoU={report.miou:.4f} OA={report.oa:.4f} mAcc={report.macc:.4f}")


def cmd_evaluate(args, cfg):
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    n = args.classes
    conf = ConfusionMatrix(np.zeros((n, n), dtype=np.int64), 0, np.zeros(n, dtype=np.int64))
    scenes = sorted(p.name[: -len(".pred.lbl")] for p in pred_dir.glob("*.pred.lbl"))
    if not scenes:
        raise StageError("evaluate", f"no *.pred.lbl files in {pred_dir}")
    try:
        for sid in scenes:
            conf = conf + confusion_matrix(read_labels(pred_dir / f"{sid}.pred.lbl"),
                                           read_labels(gt_dir / f"{sid}.gt.lbl"), n)
        report = metrics_from_confusion(conf)
    except (ValueError, OSError) as exc:
        raise StageError("evaluate", str(exc)) from exc
    doc = report.to_dict()
    doc["scenes"] = scenes
    if args.report:
        Path(args.report).write_text(json.dumps(doc, indent=2) + "\n")
    print(f"mIoU={report.miou:.4f} OA={report.oa:.4f} mAcc={report.macc:.4f} ({len(scenes)} scenes)")


def cmd_run(args, cfg):
    result = run_pipeline(cfg)
    for stats in result.rounds:
        print(json.dumps(stats))
    if result.report is not None:
        r = result.report
        print(f"mIoU={r.miou:.4f} OA={r.oa:.4f} mAcc={r.macc:.4f}")


COMMANDS = {
    "synth": cmd_synth, "init-superpoints": cmd_init, "project-features": cmd_project, "grow": cmd_grow,
    "spectral-labels": cmd_spectral, "evaluate": cmd_evaluate, "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise StageError("config", "--threads must be >= 1")
        try:
            cfg = _config(args)
        except (ValueError, TypeError, OSError) as exc:
            raise StageError("config", str(exc)) from exc
        with threadpool_limits(limits=1):
            COMMANDS[args.command](args, cfg)
    except StageError as exc:
        print(f"spgroup: error {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"spgroup: error [{args.command}] {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Segmentation scores for unsupervised predictions.

Predicted cluster IDs are first mapped onto ground-truth classes by the
one-to-one matching that maximizes the number of agreeing points.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import IGNORE, SuperpointPartition


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: ground truth, columns: prediction
    ignored: int = 0  # points with ground truth -1
    unpredicted: np.ndarray | None = None  # per gt class, points predicted -1

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def missed(self) -> np.ndarray:
        if self.unpredicted is None:
            return np.zeros(self.n_classes, dtype=np.int64)
        return self.unpredicted

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored,
                               self.missed + other.missed)


@dataclass(frozen=True)
class MetricReport:
    oa: float
    macc: float
    miou: float
    per_class_iou: np.ndarray
    per_class_acc: np.ndarray
    matching: np.ndarray
    confusion: ConfusionMatrix

    def to_dict(self) -> dict:
        def clean(a):
            return [None if np.isnan(v) else float(v) for v in a]

        gt_counts = self.confusion.counts.sum(axis=1) + self.confusion.missed
        return {
            "oa": self.oa,
            "macc": self.macc,
            "miou": self.miou,
            "per_class_iou": clean(self.per_class_iou),
            "per_class_acc": clean(self.per_class_acc),
            "matching": [int(m) for m in self.matching],
            "confusion": self.confusion.counts.astype(int).tolist(),
            "ignored": int(self.confusion.ignored),
            "per_class": [
                {"class": c, "gt_points": int(gt_counts[c]), "matched_prediction": int(self.matching[c]),
                 "iou": clean([self.per_class_iou[c]])[0], "acc": clean([self.per_class_acc[c]])[0]}
                for c in range(self.confusion.n_classes)
            ],
        }


def _best_total(counts: np.ndarray) -> int:
    if counts.size == 0:
        return 0
    r, c = linear_sum_assignment(counts, maximize=True)
    return int(counts[r, c].sum())


def hungarian_match(confusion) -> np.ndarray:
    """Permutation ``pi`` maximizing ``sum_c counts[c, pi[c]]``.

    Among optimal permutations the lexicographically smallest one is returned:
    rows are fixed in order, each to the lowest column that still admits an
    optimal completion.
    """
    counts = confusion.counts if isinstance(confusion, ConfusionMatrix) else confusion
    counts = np.asarray(counts)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
    counts = counts.astype(np.int64)
    n = counts.shape[0]
    target = _best_total(counts)
    perm = np.empty(n, dtype=np.int64)
    rows, cols = list(range(n)), list(range(n))
    acc = 0
    for r in range(n):
        rows.remove(r)
        for c in cols:
            rest = [x for x in cols if x != c]
            sub = counts[np.ix_(rows, rest)]
            if acc + counts[r, c] + _best_total(sub) == target:
                perm[r] = c
                acc += int(counts[r, c])
                cols.remove(c)
                break
    return perm


def confusion_matrix(pred, gt, n_classes: int) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predictions vs {gt.shape[0]} labels")
    for name, arr in (("prediction", pred), ("ground-truth", gt)):
        if arr.size and (arr.min() < IGNORE or arr.max() >= n_classes):
            raise ValueError(f"{name} labels must lie in [0, {n_classes}) or be -1")
    keep = gt != IGNORE
    p, g = pred[keep], gt[keep]
    hit = p != IGNORE
    counts = np.bincount(g[hit] * n_classes + p[hit], minlength=n_classes * n_classes)
    missed = np.bincount(g[~hit], minlength=n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes), int((~keep).sum()), missed)


def scores(conf: ConfusionMatrix):
    """OA, mAcc, mIoU and per-class IoU/accuracy of an already-aligned confusion matrix.

    Classes without ground-truth points get NaN and are left out of the means.
    """
    counts = conf.counts.astype(np.float64)
    missed = conf.missed.astype(np.float64)
    total = counts.sum() + missed.sum()
    if total == 0:
        raise ValueError("no evaluable points")
    tp = np.diag(counts)
    gt_total = counts.sum(axis=1) + missed
    pred_total = counts.sum(axis=0)
    present = gt_total > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, tp / (gt_total + pred_total - tp), np.nan)
        acc = np.where(present, tp / gt_total, np.nan)
    return float(tp.sum() / total), float(np.mean(acc[present])), float(np.mean(iou[present])), iou, acc


def _canonical_columns(counts: np.ndarray) -> np.ndarray:
    # content-based column order, so relabeled predictions meet the same tie-break
    return np.lexsort(counts[::-1])


def compute_metrics(pred, gt, n_classes: int) -> MetricReport:
    """Hungarian-matched OA / mAcc / mIoU; ground truth -1 is excluded."""
    conf = confusion_matrix(pred, gt, n_classes)
    return metrics_from_confusion(conf)


def metrics_from_confusion(conf: ConfusionMatrix) -> MetricReport:
    if conf.counts.sum() + conf.missed.sum() == 0:
        raise ValueError("no evaluable points")
    order = _canonical_columns(conf.counts)
    perm = order[hungarian_match(conf.counts[:, order])]
    aligned = ConfusionMatrix(conf.counts[:, perm], conf.ignored, conf.missed)
    oa, macc, miou, iou, acc = scores(aligned)
    return MetricReport(oa, macc, miou, iou, acc, perm, aligned)


def remap_predictions(pred, matching) -> np.ndarray:
    """Rewrite predicted IDs into ground-truth class IDs; -1 stays -1."""
    pred = np.asarray(pred, dtype=np.int64)
    inverse = np.empty(len(matching), dtype=np.int64)
    inverse[np.asarray(matching)] = np.arange(len(matching))
    return np.where(pred == IGNORE, IGNORE, inverse[np.clip(pred, 0, None)])


def vote_labels(partition: SuperpointPartition, gt, n_classes: int) -> np.ndarray:
    """Majority ground-truth class per superpoint (ties: smallest class), spread to its points.

    Superpoints holding only -1 points vote -1.
    """
    gt = np.asarray(gt, dtype=np.int64)
    if gt.shape[0] != partition.n_points:
        raise ValueError(f"{gt.shape[0]} labels for {partition.n_points} points")
    m = partition.n_superpoints
    keep = gt != IGNORE
    table = np.bincount(partition.point_to_sp[keep] * n_classes + gt[keep],
                        minlength=m * n_classes).reshape(m, n_classes)
    voted = np.where(table.sum(axis=1) > 0, np.argmax(table, axis=1), IGNORE)
    return voted[partition.point_to_sp]


def superpoint_purity(partition: SuperpointPartition, gt, n_classes: int) -> float:
    """mIoU of the per-superpoint majority labels against ground truth, without matching."""
    voted = vote_labels(partition, gt, n_classes)
    return scores(confusion_matrix(voted, gt, n_classes))[2]

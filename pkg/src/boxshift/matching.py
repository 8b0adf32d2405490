"""3D NMS, greedy detection-to-lesion matching, average precision, and FROC.

Matching is one-to-one: detections are processed in descending confidence and
may claim at most one unmatched lesion each; extra detections on an already
claimed lesion count as false positives. Because the greedy pass never lets a
low-confidence detection influence a higher one, a single full-depth pass
yields per-detection labels that are valid at every confidence cutoff, which
is what the PR and FROC sweeps rely on.

Confidence ties everywhere are broken deterministically: larger box volume
first, then lexicographic (min_corner, size).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box3, boxes_to_array, iou_matrix

__all__ = [
    "Detection",
    "MatchResult",
    "FrocCurve",
    "nms3d",
    "match_greedy",
    "average_precision",
    "froc",
    "sensitivity_at",
    "pr_curve",
]


@dataclass(frozen=True)
class Detection:
    """A raw detector output: a box plus a confidence in [0, 1]."""

    box: Box3
    confidence: float

    def __post_init__(self):
        c = float(self.confidence)
        if not (0.0 <= c <= 1.0) or not math.isfinite(c):
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        object.__setattr__(self, "confidence", c)


def detection_sort_key(det: Detection):
    """Descending-confidence ordering with a deterministic tie rule."""
    return (-det.confidence, -det.box.volume_voxels(), det.box.min_corner, det.box.size)


def nms3d(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression.

    Keeps a detection iff its IoU with every already kept detection is at or
    below ``iou_threshold``. Output is sorted by descending confidence.
    """
    ranked = sorted(dets, key=detection_sort_key)
    if not ranked:
        return []
    arr = boxes_to_array([d.box for d in ranked])
    kept: list[int] = []
    for i in range(len(ranked)):
        if kept:
            ious = iou_matrix(arr[i : i + 1], arr[kept])[0]
            if float(ious.max()) > iou_threshold:
                continue
        kept.append(i)
    return [ranked[i] for i in kept]


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching one subject's detections against its lesions.

    ``det_is_tp`` is aligned with the *input* detection order; ``gt_matched``
    with the input lesion order.
    """

    det_is_tp: tuple[bool, ...]
    gt_matched: tuple[bool, ...]

    @property
    def n_tp(self) -> int:
        return sum(self.det_is_tp)

    @property
    def n_fp(self) -> int:
        return len(self.det_is_tp) - self.n_tp

    @property
    def n_fn(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


def match_greedy(dets: Sequence[Detection], gts: Sequence[Box3], iou_min: float) -> MatchResult:
    """One-to-one greedy matching at the given IoU threshold.

    Detections are visited in descending confidence; each claims its
    best-overlapping still-unmatched lesion if that overlap reaches
    ``iou_min``, otherwise it is a false positive.
    """
    order = sorted(range(len(dets)), key=lambda i: detection_sort_key(dets[i]))
    det_is_tp = [False] * len(dets)
    gt_matched = [False] * len(gts)
    if dets and gts:
        ious = iou_matrix(boxes_to_array([d.box for d in dets]), boxes_to_array(gts))
        for i in order:
            best_j, best_iou = -1, 0.0
            for j in range(len(gts)):
                if gt_matched[j]:
                    continue
                v = ious[i, j]
                if v > best_iou:
                    best_j, best_iou = j, v
            if best_j >= 0 and best_iou >= iou_min:
                det_is_tp[i] = True
                gt_matched[best_j] = True
    return MatchResult(tuple(det_is_tp), tuple(gt_matched))


def _pooled_labels(
    dets_by_subject: Mapping[str, Sequence[Detection]],
    gts_by_subject: Mapping[str, Sequence[Box3]],
    iou_min: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Pool per-subject match labels: (confidences desc, tp flags, total GT)."""
    confs: list[float] = []
    flags: list[bool] = []
    n_gt = 0
    for sid, gts in gts_by_subject.items():
        n_gt += len(gts)
        dets = list(dets_by_subject.get(sid, ()))
        res = match_greedy(dets, list(gts), iou_min)
        confs.extend(d.confidence for d in dets)
        flags.extend(res.det_is_tp)
    extra = set(dets_by_subject) - set(gts_by_subject)
    if extra:
        raise ValueError(f"detections reference unknown subjects: {sorted(extra)}")
    conf_arr = np.asarray(confs, dtype=float)
    flag_arr = np.asarray(flags, dtype=bool)
    order = np.argsort(-conf_arr, kind="stable")
    return conf_arr[order], flag_arr[order], n_gt


def _sweep_counts(confs: np.ndarray, flags: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative (cutoffs desc, TP, FP) evaluated at each distinct confidence."""
    if confs.size == 0:
        return np.zeros(0), np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    # Points only at the last detection of each tie block, so tied confidences
    # are swept in or out together.
    last = np.ones(confs.size, dtype=bool)
    last[:-1] = confs[:-1] != confs[1:]
    return confs[last], tp[last], fp[last]


def average_precision(
    dets_by_subject: Mapping[str, Sequence[Detection]],
    gts_by_subject: Mapping[str, Sequence[Box3]],
    iou_min: float,
) -> float:
    """Area under the precision-recall curve at a fixed matching IoU.

    Detections are pooled over subjects and swept by descending confidence;
    the integral uses the monotone precision envelope over all operating
    points (no fixed-recall sampling): sum over recall increments of the best
    precision at or beyond that recall.
    """
    confs, flags, n_gt = _pooled_labels(dets_by_subject, gts_by_subject, iou_min)
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground-truth lesions")
    _, tp, fp = _sweep_counts(confs, flags)
    if tp.size == 0:
        return 0.0
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # Envelope: best achievable precision at recall >= r.
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * env))


@dataclass(frozen=True)
class FrocCurve:
    """Operating points swept from high to low confidence cutoff."""

    cutoffs: tuple[float, ...]
    fp_per_scan: tuple[float, ...]
    sensitivity: tuple[float, ...]

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fp_per_scan, self.sensitivity))


def froc(
    dets_by_subject: Mapping[str, Sequence[Detection]],
    gts_by_subject: Mapping[str, Sequence[Box3]],
    iou_min: float = 0.1,
) -> FrocCurve:
    """Lesion sensitivity versus average false positives per scan."""
    n_subjects = len(gts_by_subject)
    if n_subjects == 0:
        raise ValueError("FROC needs at least one subject")
    confs, flags, n_gt = _pooled_labels(dets_by_subject, gts_by_subject, iou_min)
    if n_gt == 0:
        raise ValueError("FROC needs at least one ground-truth lesion")
    cut, tp, fp = _sweep_counts(confs, flags)
    return FrocCurve(
        cutoffs=tuple(cut.tolist()),
        fp_per_scan=tuple((fp / n_subjects).tolist()),
        sensitivity=tuple((tp / n_gt).tolist()),
    )


def sensitivity_at(curve: FrocCurve, fp_per_scan: float) -> float:
    """Best sensitivity reached at or under an FP-per-scan budget; 0 if none."""
    if not curve.cutoffs:
        raise ValueError("empty FROC curve")
    best = 0.0
    for f, s in zip(curve.fp_per_scan, curve.sensitivity):
        if f <= fp_per_scan and s > best:
            best = s
    return best


def pr_curve(
    dets_by_subject: Mapping[str, Sequence[Detection]],
    gts_by_subject: Mapping[str, Sequence[Box3]],
    iou_min: float,
) -> list[tuple[float, float, float]]:
    """(cutoff, recall, precision) operating points, cutoff descending."""
    confs, flags, n_gt = _pooled_labels(dets_by_subject, gts_by_subject, iou_min)
    if n_gt == 0:
        raise ValueError("PR curve is undefined without ground-truth lesions")
    cut, tp, fp = _sweep_counts(confs, flags)
    return [
        (float(c), float(t) / n_gt, float(t) / float(t + f))
        for c, t, f in zip(cut, tp, fp)
    ]

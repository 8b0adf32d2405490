"""Turning raw target-domain detections into pseudo labels.

All selection strategies start from the same cleaned candidate set: a
confidence floor followed by 3D NMS. The prior-guided strategy then fills
per-volume-bin quotas with the most confident candidates, so the composition
of what gets selected follows the running size prior rather than whatever the
detector happens to emit most confidently. The pooled top-fraction and
keep-everything strategies are the conventional baselines.

This module sees detections only; subjects' ground truth is not an input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .geometry import BinningConfig, Box3, Spacing, bin_of
from .matching import Detection, detection_sort_key, nms3d
from .priors import Quota

__all__ = [
    "PseudoLabelSet",
    "candidate_set",
    "select_prior_guided",
    "select_top_p",
    "select_fixed_threshold",
]

MODE_PRIOR_GUIDED = "prior_guided"
MODE_TOP_P = "top_p"
MODE_FIXED_THRESHOLD = "fixed_threshold"


@dataclass(frozen=True)
class PseudoLabelSet:
    """Per-subject pseudo boxes (single lesion class) plus provenance.

    ``mode`` records the selection rule and ``round`` the loop round that
    produced the labels, so serialized label sets can be audited.
    """

    boxes_by_subject: Mapping[str, tuple[Box3, ...]]
    round: int
    mode: str

    def __post_init__(self):
        frozen = {sid: tuple(boxes) for sid, boxes in self.boxes_by_subject.items()}
        object.__setattr__(self, "boxes_by_subject", frozen)

    def all_boxes(self) -> list[Box3]:
        out: list[Box3] = []
        for boxes in self.boxes_by_subject.values():
            out.extend(boxes)
        return out

    def counts_by_subject(self) -> dict[str, int]:
        return {sid: len(boxes) for sid, boxes in self.boxes_by_subject.items()}

    @property
    def n_boxes(self) -> int:
        return sum(len(b) for b in self.boxes_by_subject.values())


def candidate_set(raw: Sequence[Detection], tau: float, nms_iou: float) -> list[Detection]:
    """Confidence floor then NMS; returns candidates by descending confidence."""
    kept = [d for d in raw if d.confidence >= tau]
    return nms3d(kept, nms_iou)


def select_prior_guided(
    candidates_by_subject: Mapping[str, Sequence[Detection]],
    quota: Quota,
    binning: BinningConfig,
    spacing: Spacing,
    round: int = 0,
) -> PseudoLabelSet:
    """Keep the top-confidence candidates per volume bin, up to each bin's quota.

    The same quota applies to every subject. Bins with fewer candidates than
    slots keep everything they have; unused slots are not moved to other bins,
    which would tip the composition back toward whatever the detector
    over-produces.
    """
    if quota.total > 0 and len(quota.per_bin) != binning.n_bins:
        raise ValueError(f"quota has {len(quota.per_bin)} bins, binning has {binning.n_bins}")
    selected: dict[str, tuple[Box3, ...]] = {}
    for sid, cands in candidates_by_subject.items():
        by_bin: dict[int, list[Detection]] = {}
        for det in cands:
            by_bin.setdefault(bin_of(det.box, spacing, binning), []).append(det)
        picked: list[Detection] = []
        for b, dets in by_bin.items():
            n_b = quota.per_bin[b - 1]
            if n_b <= 0:
                continue
            dets.sort(key=detection_sort_key)
            picked.extend(dets[:n_b])
        picked.sort(key=detection_sort_key)
        selected[sid] = tuple(d.box for d in picked)
    return PseudoLabelSet(selected, round=round, mode=MODE_PRIOR_GUIDED)


def select_top_p(
    candidates_by_subject: Mapping[str, Sequence[Detection]],
    p: float,
    round: int = 0,
) -> PseudoLabelSet:
    """Keep the top fraction ``p`` of each subject's candidates by confidence.

    The count is rounded up, so a subject with any candidates at all keeps at
    least one.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"selection fraction must lie in (0, 1], got {p}")
    selected: dict[str, tuple[Box3, ...]] = {}
    for sid, cands in candidates_by_subject.items():
        ranked = sorted(cands, key=detection_sort_key)
        keep = math.ceil(p * len(ranked))
        selected[sid] = tuple(d.box for d in ranked[:keep])
    return PseudoLabelSet(selected, round=round, mode=MODE_TOP_P)


def select_fixed_threshold(
    candidates_by_subject: Mapping[str, Sequence[Detection]],
    round: int = 0,
) -> PseudoLabelSet:
    """Keep every cleaned candidate (the confidence floor already applied)."""
    selected = {
        sid: tuple(d.box for d in sorted(cands, key=detection_sort_key))
        for sid, cands in candidates_by_subject.items()
    }
    return PseudoLabelSet(selected, round=round, mode=MODE_FIXED_THRESHOLD)

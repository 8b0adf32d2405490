"""Synthetic cross-domain cohorts and a transparent stand-in detector.

No images are synthesized. A cohort is a list of subjects, each carrying
ground-truth lesion boxes drawn from a configurable count distribution and
volume-bin histogram, so label shift between cohorts (more/fewer lesions,
different size composition) is a direct knob.

The detector is a small parametric state instead of a neural network: per-bin
recall, a size "belief" histogram that drives false-positive sizes, a
false-positive rate, and confidence models. Its detection probability,
localization noise, and confidence all improve with anchor coverage, which is
what couples anchor adaptation to measurable detection quality. Training on
pseudo labels nudges the state using ground truth as the stand-in for
gradient signal (real training sees images, which are correlated with ground
truth); nothing else in the adaptation stack reads labels.

Everything is a pure function of (inputs, seed): cohorts use one child seed
stream per subject, so generation is order-independent and reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .anchors import AnchorSet, coverage_many
from .geometry import (
    MIN_LESION_CC,
    BinningConfig,
    Box3,
    Spacing,
    bins_of_volumes,
    boxes_to_array,
    iou_matrix,
    volumes_cc,
)
from .matching import Detection, match_greedy
from .priors import histogram_of_boxes
from .selection import PseudoLabelSet

__all__ = [
    "CohortSpec",
    "Subject",
    "SimDetector",
    "CohortGenerationError",
    "fdg_like",
    "psma_like",
    "new_detector",
    "generate_cohort",
    "infer",
    "train_update",
    "source_pretrain",
]

DEFAULT_SPACING = Spacing(4.0, 4.0, 5.0)
DEFAULT_FIELD = (96, 96, 96)

# IoU at which a pseudo box counts as hitting a lesion inside train_update,
# and the maximum IoU allowed between generated ground-truth boxes.
TRAIN_MATCH_IOU = 0.1
GT_OVERLAP_CAP = 0.1

# Qualitative size-composition presets. The "fdg"-style source cohort skews
# to medium/large lesions with a visible very-large tail; the "psma"-style
# target cohort has many more small lesions per subject.
FDG_SIZE_HIST = (0.0, 0.03, 0.08, 0.14, 0.20, 0.22, 0.16, 0.09, 0.05, 0.03)
PSMA_SIZE_HIST = (0.0, 0.22, 0.26, 0.22, 0.15, 0.08, 0.04, 0.02, 0.008, 0.002)
FDG_MEAN_LESIONS = 7.0
PSMA_MEAN_LESIONS = 22.0


class CohortGenerationError(RuntimeError):
    """Raised when a subject's lesions cannot be placed within bounds."""


@dataclass(frozen=True)
class CohortSpec:
    """Generative recipe for one cohort."""

    name: str
    domain: str
    n_subjects: int
    mean_lesions: float
    size_hist: tuple[float, ...]
    dispersion: float = 1.6
    field: tuple[int, int, int] = DEFAULT_FIELD
    spacing: Spacing = DEFAULT_SPACING
    binning: BinningConfig = BinningConfig()
    seed: int = 0
    aspect_limit: float = 2.0
    max_volume_cc: float = 400.0

    def __post_init__(self):
        if self.n_subjects < 0:
            raise ValueError("n_subjects must be nonnegative")
        if self.mean_lesions < 0:
            raise ValueError("mean lesion count must be nonnegative")
        if self.dispersion < 1.0:
            raise ValueError("dispersion must be >= 1 (1 gives Poisson counts)")
        hist = tuple(float(v) for v in self.size_hist)
        object.__setattr__(self, "size_hist", hist)
        if len(hist) != self.binning.n_bins:
            raise ValueError(
                f"size_hist has {len(hist)} bins but binning defines {self.binning.n_bins}"
            )
        if any(v < 0 for v in hist) or abs(sum(hist) - 1.0) > 1e-9:
            raise ValueError("size_hist must be a normalized histogram")
        for b, mass in enumerate(hist, start=1):
            lo, hi = self.binning.bin_range(b)
            if mass > 0 and hi <= MIN_LESION_CC:
                raise ValueError(
                    f"size_hist puts mass {mass} on bin {b} ({lo}..{hi} cc), "
                    f"below the {MIN_LESION_CC} cc annotation floor"
                )
        field = tuple(int(v) for v in self.field)
        object.__setattr__(self, "field", field)
        if len(field) != 3 or any(v <= 0 for v in field):
            raise ValueError("field must be three positive voxel extents")
        if self.aspect_limit < 1.0:
            raise ValueError("aspect_limit must be >= 1")
        if self.max_volume_cc <= MIN_LESION_CC:
            raise ValueError("max_volume_cc must exceed the annotation floor")


def fdg_like(n_subjects: int, seed: int, domain: str = "source", **overrides) -> CohortSpec:
    """Source-style cohort: fewer lesions, medium/large-dominated sizes."""
    return CohortSpec(
        name="fdg_like",
        domain=domain,
        n_subjects=n_subjects,
        mean_lesions=FDG_MEAN_LESIONS,
        size_hist=FDG_SIZE_HIST,
        seed=seed,
        **overrides,
    )


def psma_like(n_subjects: int, seed: int, domain: str = "target", **overrides) -> CohortSpec:
    """Target-style cohort: many more small lesions per subject."""
    return CohortSpec(
        name="psma_like",
        domain=domain,
        n_subjects=n_subjects,
        mean_lesions=PSMA_MEAN_LESIONS,
        size_hist=PSMA_SIZE_HIST,
        seed=seed,
        **overrides,
    )


@dataclass(frozen=True)
class Subject:
    """One case: identity, domain tag, hidden ground-truth boxes, bounds."""

    id: str
    domain: str
    gt_boxes: tuple[Box3, ...]
    field: tuple[int, int, int] = DEFAULT_FIELD

    def __post_init__(self):
        object.__setattr__(self, "gt_boxes", tuple(self.gt_boxes))
        field = tuple(int(v) for v in self.field)
        object.__setattr__(self, "field", field)
        for box in self.gt_boxes:
            if any(c < -1e-9 for c in box.min_corner) or any(
                hi > f + 1e-9 for hi, f in zip(box.max_corner, field)
            ):
                raise ValueError(f"subject {self.id}: box {box} lies outside field {field}")


@dataclass(frozen=True)
class SimDetector:
    """Parametric detector state standing in for a trained model.

    ``rho`` is per-bin base recall; the probability of detecting a lesion is
    rho[bin] * (mix + (1-mix) * fit), where fit is the saturating
    :meth:`coverage_response` to the lesion's anchor coverage, so poorly
    covered shapes are both missed more often and localized worse (jitter
    scales with the raw 1-coverage). False positives arrive
    Poisson(``fp_rate``) per subject with sizes drawn from ``belief_hist``,
    the detector's current idea of what lesions look like. Confidences are
    Beta-distributed; true-positive confidence rises with anchor fit while
    false-positive confidence does not.
    """

    rho: tuple[float, ...]
    belief_hist: tuple[float, ...]
    fp_rate: float
    jitter: float = 0.15
    coverage_mix: float = 0.3
    coverage_sat: float = 0.45
    conf_tp_base: float = 0.55
    conf_tp_gain: float = 0.3
    conf_fp_mean: float = 0.52
    conf_kappa: float = 12.0
    fp_floor: float = 0.25
    # Cross-domain confusion drives false positives: on familiar source-domain
    # scans the rate is scaled down by this factor.
    source_fp_factor: float = 0.3
    # Appearance-shift proficiency on non-source scans: scales detection
    # probability there and grows only through target-domain training.
    target_skill: float = 0.7

    def __post_init__(self):
        rho = tuple(float(v) for v in self.rho)
        belief = tuple(float(v) for v in self.belief_hist)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "belief_hist", belief)
        if len(rho) != len(belief):
            raise ValueError("rho and belief_hist must have one entry per bin")
        if any(not 0.0 <= v <= 1.0 for v in rho):
            raise ValueError("per-bin recall must lie in [0, 1]")
        if any(v < 0 for v in belief) or abs(sum(belief) - 1.0) > 1e-9:
            raise ValueError("belief_hist must be a normalized histogram")
        if self.fp_rate < 0 or self.fp_floor < 0:
            raise ValueError("false-positive rates must be nonnegative")
        if not 0.0 <= self.coverage_mix <= 1.0:
            raise ValueError("coverage_mix must lie in [0, 1]")
        if not 0.0 < self.coverage_sat <= 1.0:
            raise ValueError("coverage_sat must lie in (0, 1]")
        if not 0.0 <= self.source_fp_factor <= 1.0:
            raise ValueError("source_fp_factor must lie in [0, 1]")
        if not 0.0 <= self.target_skill <= 1.0:
            raise ValueError("target_skill must lie in [0, 1]")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")
        if self.conf_kappa <= 0:
            raise ValueError("conf_kappa must be positive")

    @property
    def n_bins(self) -> int:
        return len(self.rho)

    def coverage_response(self, cov: np.ndarray) -> np.ndarray:
        """Saturating response to anchor fit.

        Anchors within a factor-of-few of the right extents regress boxes
        about equally well, so the response ramps linearly only up to
        ``coverage_sat`` and is flat above it. Badly covered shapes (the
        small-lesion regime under source anchors) stay strongly penalized.
        """
        return np.clip(np.asarray(cov, dtype=float) / self.coverage_sat, 0.0, 1.0)


def new_detector(binning: BinningConfig, rho_init: float = 0.1, fp_rate: float = 2.5, **overrides) -> SimDetector:
    """Untrained detector: flat per-bin recall, size belief uniform over

    bins that can hold an annotatable lesion."""
    n = binning.n_bins
    valid = np.array([binning.bin_range(b)[1] > MIN_LESION_CC for b in range(1, n + 1)], dtype=float)
    belief = valid / valid.sum()
    return SimDetector(
        rho=(rho_init,) * n,
        belief_hist=tuple(belief.tolist()),
        fp_rate=fp_rate,
        **overrides,
    )


def _draw_count(rng: np.random.Generator, mean: float, dispersion: float) -> int:
    if mean <= 0:
        return 0
    if dispersion <= 1.0 + 1e-12:
        return int(rng.poisson(mean))
    # Negative binomial with the requested mean and variance mean*dispersion.
    n = mean / (dispersion - 1.0)
    p = 1.0 / dispersion
    return int(rng.negative_binomial(n, p))


def _draw_volume_cc(
    rng: np.random.Generator, bin_index: int, binning: BinningConfig, max_volume_cc: float
) -> float:
    lo, hi = binning.bin_range(bin_index)
    lo = max(lo, MIN_LESION_CC)
    hi = min(hi, max_volume_cc) if math.isfinite(hi) else max_volume_cc
    if hi <= lo:
        hi = lo * 1.0001
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _shape_for_volume(
    rng: np.random.Generator, volume_cc: float, spacing: Spacing, aspect_limit: float
) -> np.ndarray:
    target_vox = volume_cc * 1000.0 / spacing.voxel_mm3
    log_a = math.log(aspect_limit)
    aspect = np.exp(rng.uniform(-log_a, log_a, size=3))
    base = (target_vox / aspect.prod()) ** (1.0 / 3.0)
    return base * aspect


def _place_box(
    rng: np.random.Generator, size: np.ndarray, field: tuple[int, int, int]
) -> Box3 | None:
    room = np.asarray(field, dtype=float) - size
    if np.any(room < 0):
        return None
    corner = rng.uniform(0.0, 1.0, size=3) * room
    return Box3(tuple(corner.tolist()), tuple(size.tolist()))


def generate_cohort(spec: CohortSpec) -> list[Subject]:
    """Draw a full cohort from the spec; same seed gives the same cohort."""
    streams = np.random.SeedSequence(spec.seed).spawn(spec.n_subjects)
    hist = np.asarray(spec.size_hist)
    subjects: list[Subject] = []
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        sid = f"{spec.domain}-{i:04d}"
        count = _draw_count(rng, spec.mean_lesions, spec.dispersion)
        accepted: list[Box3] = []
        accepted_arr = np.zeros((0, 6))
        for _ in range(count):
            box = None
            for _resample in range(5):
                b = int(rng.choice(hist.size, p=hist)) + 1
                vol = _draw_volume_cc(rng, b, spec.binning, spec.max_volume_cc)
                size = _shape_for_volume(rng, vol, spec.spacing, spec.aspect_limit)
                for _attempt in range(40):
                    cand = _place_box(rng, size, spec.field)
                    if cand is None:
                        break
                    if accepted_arr.shape[0] == 0 or float(
                        iou_matrix(boxes_to_array([cand]), accepted_arr).max()
                    ) <= GT_OVERLAP_CAP:
                        box = cand
                        break
                if box is not None:
                    break
            if box is None:
                raise CohortGenerationError(
                    f"subject {sid}: could not place a lesion within {spec.field} "
                    f"after bounded retries"
                )
            accepted.append(box)
            accepted_arr = boxes_to_array(accepted)
        subjects.append(Subject(id=sid, domain=spec.domain, gt_boxes=tuple(accepted), field=spec.field))
    return subjects


def _beta_confidences(rng: np.random.Generator, means: np.ndarray, kappa: float) -> np.ndarray:
    means = np.clip(means, 0.02, 0.98)
    return rng.beta(means * kappa, (1.0 - means) * kappa)


def infer(
    det: SimDetector,
    subject: Subject,
    anchors: AnchorSet,
    binning: BinningConfig,
    spacing: Spacing,
    seed,
) -> list[Detection]:
    """Simulated forward pass on one subject.

    Each lesion is detected with probability rho[bin] * (mix + (1-mix)*fit);
    detected boxes are jittered with noise proportional to (1 - coverage).
    False positives are added at Poisson(fp_rate) with sizes drawn from the
    detector's belief histogram and uniform placement.
    """
    rng = np.random.default_rng(seed)
    out: list[Detection] = []
    gts = subject.gt_boxes
    if gts:
        arr = boxes_to_array(gts)
        shapes = arr[:, 3:]
        cov = coverage_many(shapes, anchors)
        fit = det.coverage_response(cov)
        bins = bins_of_volumes(volumes_cc(arr, spacing), binning)
        rho = np.asarray(det.rho)[bins - 1]
        p_detect = rho * (det.coverage_mix + (1.0 - det.coverage_mix) * fit)
        if subject.domain != "source":
            p_detect = p_detect * det.target_skill
        hits = np.flatnonzero(rng.random(len(gts)) < p_detect)
        if hits.size:
            sigma = det.jitter * (1.0 - cov[hits])
            centers = arr[hits, :3] + shapes[hits] / 2.0
            center_shift = rng.normal(size=(hits.size, 3)) * sigma[:, None] * shapes[hits]
            size_factor = np.maximum(1.0 + rng.normal(size=(hits.size, 3)) * sigma[:, None], 0.3)
            new_sizes = shapes[hits] * size_factor
            new_centers = centers + center_shift
            confs = _beta_confidences(
                rng, det.conf_tp_base + det.conf_tp_gain * fit[hits], det.conf_kappa
            )
            for c, s, conf in zip(new_centers, new_sizes, confs):
                out.append(Detection(Box3.from_center_size(c, s), float(conf)))
    fp_rate = det.fp_rate * (det.source_fp_factor if subject.domain == "source" else 1.0)
    n_fp = int(rng.poisson(fp_rate))
    if n_fp:
        belief = np.asarray(det.belief_hist, dtype=float).copy()
        for b in range(1, binning.n_bins + 1):
            if binning.bin_range(b)[1] <= MIN_LESION_CC:
                belief[b - 1] = 0.0
        belief /= belief.sum()
        fp_bins = rng.choice(belief.size, size=n_fp, p=belief) + 1
        fp_confs = _beta_confidences(rng, np.full(n_fp, det.conf_fp_mean), det.conf_kappa)
        for b, conf in zip(fp_bins, fp_confs):
            vol = _draw_volume_cc(rng, int(b), binning, max_volume_cc=400.0)
            size = _shape_for_volume(rng, vol, spacing, aspect_limit=2.0)
            size = np.minimum(size, np.asarray(subject.field, dtype=float))
            box = _place_box(rng, size, subject.field)
            if box is None:
                continue
            out.append(Detection(box, float(conf)))
    return out


def train_update(
    det: SimDetector,
    pseudo: PseudoLabelSet,
    subjects_by_id: Mapping[str, Subject],
    anchors: AnchorSet,
    binning: BinningConfig,
    spacing: Spacing,
    rate: float,
    target_feedback: bool = True,
) -> SimDetector:
    """One training step on pseudo labels, scored against ground truth.

    Per bin: precision q of the bin's pseudo boxes (one-to-one match at
    IoU >= 0.1), mean anchor-fit response, and the bin's share of the
    training signal (count normalized by the best-supported bin) jointly
    scale how much headroom (1 - rho) is consumed. The belief histogram
    blends toward the pseudo-label histogram.

    ``target_feedback`` marks training on target-domain labels: it shrinks
    the target false-positive rate and grows target-domain proficiency, both
    in proportion to overall label precision. Supervised source passes leave
    those alone; source-domain training does not fix appearance-shift
    failure modes.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"learning rate must lie in (0, 1], got {rate}")
    n_bins = binning.n_bins
    counts = np.zeros(n_bins)
    correct = np.zeros(n_bins)
    cov_sum = np.zeros(n_bins)
    for sid, boxes in pseudo.boxes_by_subject.items():
        if not boxes:
            continue
        subject = subjects_by_id[sid]
        dets = [Detection(b, 1.0) for b in boxes]
        res = match_greedy(dets, list(subject.gt_boxes), TRAIN_MATCH_IOU)
        arr = boxes_to_array(boxes)
        bins = bins_of_volumes(volumes_cc(arr, spacing), binning)
        fit = det.coverage_response(coverage_many(arr[:, 3:], anchors))
        for b, tp, cv in zip(bins, res.det_is_tp, fit):
            counts[b - 1] += 1.0
            correct[b - 1] += float(tp)
            cov_sum[b - 1] += cv
    total = counts.sum()
    if total == 0:
        return det
    occupied = counts > 0
    q = np.divide(correct, counts, out=np.zeros(n_bins), where=occupied)
    mean_cov = np.divide(cov_sum, counts, out=np.zeros(n_bins), where=occupied)
    support = counts / counts.max()
    rho = np.asarray(det.rho, dtype=float).copy()
    rho[occupied] += rate * (q * support * mean_cov * (1.0 - rho))[occupied]
    np.clip(rho, 0.0, 1.0, out=rho)
    precision = float(correct.sum() / total)
    fp_rate = det.fp_rate
    skill = det.target_skill
    if target_feedback:
        fp_rate = max(det.fp_floor, fp_rate * (1.0 - rate * precision))
        skill = skill + rate * precision * (1.0 - skill)
    belief = (1.0 - rate) * np.asarray(det.belief_hist) + rate * (counts / total)
    belief /= belief.sum()
    return replace(
        det,
        rho=tuple(rho.tolist()),
        belief_hist=tuple(belief.tolist()),
        fp_rate=fp_rate,
        target_skill=skill,
    )


def source_pretrain(
    det: SimDetector,
    source: Sequence[Subject],
    anchors: AnchorSet,
    binning: BinningConfig,
    spacing: Spacing,
    rate: float = 0.25,
    max_iters: int = 10,
    tol: float = 1e-4,
) -> SimDetector:
    """Supervised pretraining on the labeled source cohort.

    Runs training steps with the ground truth as labels until per-bin recall
    plateaus (or the iteration cap is hit), then pins the belief histogram to
    the source label histogram. The false-positive rate is left at its
    initial value: it models cross-domain confusion that source supervision
    cannot remove.
    """
    labels = PseudoLabelSet(
        {s.id: s.gt_boxes for s in source}, round=0, mode="supervised"
    )
    subjects_by_id = {s.id: s for s in source}
    for _ in range(max_iters):
        updated = train_update(
            det, labels, subjects_by_id, anchors, binning, spacing, rate, target_feedback=False
        )
        delta = max(abs(a - b) for a, b in zip(updated.rho, det.rho))
        det = updated
        if delta < tol:
            break
    all_boxes = [b for s in source for b in s.gt_boxes]
    return replace(det, belief_hist=histogram_of_boxes(all_boxes, binning, spacing))

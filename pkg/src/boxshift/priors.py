"""Target-domain label priors: lesion count, size histogram, and bin quotas.

The adaptation loop keeps two running estimates of the unlabeled target
cohort's label statistics: ``mu``, the mean number of lesions per subject,
and ``hist``, a normalized histogram over volume bins. Both are exponential
moving averages refreshed once per round. A per-subject selection budget is a
fraction of ``mu``, and the budget is split across volume bins by
largest-remainder apportionment of ``hist``.

These functions consume detector outputs only; ground truth never enters
this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BinningConfig, Box3, Spacing, bins_of_volumes, volumes_cc, boxes_to_array

__all__ = [
    "PriorState",
    "Quota",
    "update_mu",
    "budget",
    "update_hist",
    "allocate_quota",
    "histogram_of_boxes",
    "total_variation",
]

_SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class PriorState:
    """Round-stamped prior estimates: mean lesions per subject and size bins."""

    mu: float
    hist: tuple[float, ...]
    round: int = 0

    def __post_init__(self):
        if not (self.mu >= 0 and math.isfinite(self.mu)):
            raise ValueError(f"mu must be nonnegative and finite, got {self.mu}")
        hist = tuple(float(v) for v in self.hist)
        object.__setattr__(self, "hist", hist)
        if any(v < 0 for v in hist):
            raise ValueError("histogram entries must be nonnegative")
        if abs(sum(hist) - 1.0) > _SIMPLEX_TOL:
            raise ValueError(f"histogram must sum to 1, got {sum(hist)!r}")
        if self.round < 0:
            raise ValueError("round must be nonnegative")

    @property
    def n_bins(self) -> int:
        return len(self.hist)


@dataclass(frozen=True)
class Quota:
    """Integer per-bin selection slots summing exactly to the budget."""

    per_bin: tuple[int, ...]

    def __post_init__(self):
        per_bin = tuple(int(v) for v in self.per_bin)
        object.__setattr__(self, "per_bin", per_bin)
        if any(v < 0 for v in per_bin):
            raise ValueError("quota entries must be nonnegative")

    @property
    def total(self) -> int:
        return sum(self.per_bin)


def update_mu(prev: PriorState, counts_per_subject: Sequence[int], alpha_mu: float) -> float:
    """Moving-average refresh of mean lesions per subject.

    ``counts_per_subject`` must cover every target subject (zeros included);
    the new value is (1-alpha)*old + alpha*mean(counts).
    """
    if len(counts_per_subject) == 0:
        raise ValueError("need at least one subject count to update mu")
    mean = float(np.mean(np.asarray(counts_per_subject, dtype=float)))
    return (1.0 - alpha_mu) * prev.mu + alpha_mu * mean


def budget(mu: float, lam: float) -> int:
    """Per-subject selection budget: fraction ``lam`` of ``mu``, rounded half-up.

    Half-up keeps small budgets from being starved systematically; a product
    under 0.5 still yields a zero budget (no selections that round).
    """
    if mu < 0:
        raise ValueError(f"mu must be nonnegative, got {mu}")
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"selection fraction must lie in (0, 1], got {lam}")
    return int(math.floor(lam * mu + 0.5))


def histogram_of_boxes(
    boxes: Sequence[Box3], binning: BinningConfig, spacing: Spacing
) -> tuple[float, ...]:
    """Normalized volume-bin histogram of a box collection (must be nonempty)."""
    if len(boxes) == 0:
        raise ValueError("cannot build a histogram from zero boxes")
    bins = bins_of_volumes(volumes_cc(boxes_to_array(boxes), spacing), binning)
    counts = np.bincount(bins - 1, minlength=binning.n_bins).astype(float)
    return tuple((counts / counts.sum()).tolist())


def update_hist(
    prev: PriorState,
    selected_boxes: Sequence[Box3],
    binning: BinningConfig,
    spacing: Spacing,
    alpha_h: float,
) -> tuple[float, ...]:
    """Moving-average refresh of the size histogram, renormalized.

    With no selected boxes this round the histogram is left untouched (there
    is no fresh estimate to blend in).
    """
    if binning.n_bins != prev.n_bins:
        raise ValueError(f"bin count mismatch: prior has {prev.n_bins}, binning has {binning.n_bins}")
    if len(selected_boxes) == 0:
        return prev.hist
    fresh = np.asarray(histogram_of_boxes(selected_boxes, binning, spacing))
    blended = (1.0 - alpha_h) * np.asarray(prev.hist) + alpha_h * fresh
    blended /= blended.sum()
    return tuple(blended.tolist())


def allocate_quota(hist: Sequence[float], n_allow: int) -> Quota:
    """Largest-remainder apportionment of ``n_allow`` slots across bins.

    Fractional quotas are the histogram shares scaled by the budget; each bin
    gets the integer part, and leftover slots go to the largest fractional
    remainders (ties favor the lower bin index). The result sums to
    ``n_allow`` exactly and every bin is within one slot of its fractional
    share.
    """
    if n_allow < 0:
        raise ValueError(f"budget must be nonnegative, got {n_allow}")
    h = np.asarray(hist, dtype=float)
    if h.ndim != 1 or h.size == 0:
        raise ValueError("histogram must be a nonempty 1-D sequence")
    if np.any(h < 0) or not np.all(np.isfinite(h)):
        raise ValueError("histogram entries must be nonnegative and finite")
    total = h.sum()
    if total <= 0:
        raise ValueError("histogram must have positive mass")
    if n_allow == 0:
        return Quota(per_bin=(0,) * h.size)
    fractional = (h / total) * n_allow
    base = np.floor(fractional).astype(int)
    leftover = int(n_allow - base.sum())
    remainders = fractional - base
    # Sort by remainder descending, index ascending on ties.
    order = np.lexsort((np.arange(h.size), -remainders))
    base[order[:leftover]] += 1
    return Quota(per_bin=tuple(int(v) for v in base))


def total_variation(a: Sequence[float], b: Sequence[float]) -> float:
    """Total-variation distance between two histograms of equal length."""
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"histogram length mismatch: {x.shape} vs {y.shape}")
    return 0.5 * float(np.abs(x - y).sum())

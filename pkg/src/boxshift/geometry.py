"""Axis-aligned 3D box arithmetic, physical volumes, and volume binning.

Boxes live in continuous voxel coordinates (sub-voxel positions allowed) and
are stored as min-corner + size. Physical context enters only through a
:class:`Spacing` (millimeters per voxel along each axis). All functions here
are pure and all types are immutable.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Spacing",
    "Box3",
    "BinningConfig",
    "volume_cc",
    "iou",
    "bin_of",
    "shape_of",
    "boxes_to_array",
    "iou_matrix",
    "volumes_cc",
    "bins_of_volumes",
]


@dataclass(frozen=True)
class Spacing:
    """Physical voxel spacing in millimeters along x, y, z."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        for name in ("dx", "dy", "dz"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"spacing {name} must be a positive finite number, got {v}")

    @property
    def voxel_mm3(self) -> float:
        return self.dx * self.dy * self.dz


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box: min corner plus strictly positive extents, in voxels."""

    min_corner: tuple[float, float, float]
    size: tuple[float, float, float]

    def __post_init__(self):
        if len(self.min_corner) != 3 or len(self.size) != 3:
            raise ValueError("min_corner and size must have three components")
        object.__setattr__(self, "min_corner", tuple(float(v) for v in self.min_corner))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        for v in self.min_corner:
            if not math.isfinite(v):
                raise ValueError(f"non-finite corner coordinate {v}")
        for v in self.size:
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"box extents must be positive and finite, got size={self.size}")

    @property
    def max_corner(self) -> tuple[float, float, float]:
        return tuple(c + s for c, s in zip(self.min_corner, self.size))

    @property
    def center(self) -> tuple[float, float, float]:
        return tuple(c + s / 2 for c, s in zip(self.min_corner, self.size))

    @classmethod
    def from_center_size(cls, center: Sequence[float], size: Sequence[float]) -> "Box3":
        """Converter for center+size box records (file-format boundary)."""
        return cls(tuple(c - s / 2 for c, s in zip(center, size)), tuple(size))

    def volume_voxels(self) -> float:
        w, h, d = self.size
        return w * h * d


# Volume floor (cc) below which lesions are not annotated: one voxel at the
# default spacing. Generators enforce it; binning does not depend on it.
MIN_LESION_CC = 0.08

_DEFAULT_FIRST_EDGE = 0.08
_DEFAULT_LAST_EDGE = 150.0
_DEFAULT_BINS = 10


def _default_edges(n_bins: int = _DEFAULT_BINS) -> tuple[float, ...]:
    # Geometric ladder: first edge at the annotation floor, last edge at the
    # "very large" bucket boundary; bin 1 is [0, first) and bin B is open-ended.
    # Endpoints are pinned exactly so boundary volumes bin predictably.
    n_edges = n_bins - 1
    lo, hi = math.log(_DEFAULT_FIRST_EDGE), math.log(_DEFAULT_LAST_EDGE)
    edges = [math.exp(lo + (hi - lo) * i / (n_edges - 1)) for i in range(n_edges)]
    edges[0], edges[-1] = _DEFAULT_FIRST_EDGE, _DEFAULT_LAST_EDGE
    return tuple(edges)


@dataclass(frozen=True)
class BinningConfig:
    """Volume-bin layout: B-1 strictly increasing thresholds in cc.

    Bin ``i`` (1-based) covers the half-open interval
    ``[edges[i-2], edges[i-1])``; bin 1 starts at 0 and the last bin is
    open-ended, so every nonnegative volume maps to exactly one bin.
    """

    edges: tuple[float, ...] = _default_edges()

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(float(e) for e in self.edges))
        if len(self.edges) < 1:
            raise ValueError("need at least one bin edge")
        for e in self.edges:
            if not (e > 0 and math.isfinite(e)):
                raise ValueError(f"bin edges must be positive and finite, got {e}")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError(f"bin edges must be strictly increasing, got {self.edges}")

    @property
    def n_bins(self) -> int:
        return len(self.edges) + 1

    def bin_range(self, b: int) -> tuple[float, float]:
        """(low, high) volume range of 1-based bin ``b``; last bin high is inf."""
        if not 1 <= b <= self.n_bins:
            raise ValueError(f"bin index {b} out of range 1..{self.n_bins}")
        lo = 0.0 if b == 1 else self.edges[b - 2]
        hi = math.inf if b == self.n_bins else self.edges[b - 1]
        return lo, hi

    def bin_of_volume(self, volume_cc: float) -> int:
        """1-based bin of a volume; values equal to an edge go to the upper bin."""
        return bisect.bisect_right(self.edges, volume_cc) + 1


def volume_cc(box: Box3, spacing: Spacing) -> float:
    """Physical box volume in cubic centimeters."""
    return box.volume_voxels() * spacing.voxel_mm3 / 1000.0


def iou(a: Box3, b: Box3) -> float:
    """Intersection-over-union of two boxes in voxel space; 0 when disjoint."""
    inter = 1.0
    for lo_a, lo_b, sa, sb in zip(a.min_corner, b.min_corner, a.size, b.size):
        overlap = min(lo_a + sa, lo_b + sb) - max(lo_a, lo_b)
        if overlap <= 0:
            return 0.0
        inter *= overlap
    union = a.volume_voxels() + b.volume_voxels() - inter
    return inter / union


def bin_of(box: Box3, spacing: Spacing, cfg: BinningConfig) -> int:
    """Volume bin (1-based) of a box under the given spacing and bin layout."""
    return cfg.bin_of_volume(volume_cc(box, spacing))


def shape_of(box: Box3) -> tuple[float, float, float]:
    """Position-independent extents (w, h, d) of a box."""
    return box.size


# ---------------------------------------------------------------------------
# Array helpers for the hot paths (matching, simulation). Boxes are rows of
# [min_x, min_y, min_z, w, h, d].


def boxes_to_array(boxes: Iterable[Box3]) -> np.ndarray:
    rows = [(*b.min_corner, *b.size) for b in boxes]
    if not rows:
        return np.zeros((0, 6), dtype=float)
    return np.asarray(rows, dtype=float)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N,6) / (M,6) box arrays -> (N,M)."""
    a = np.asarray(a, dtype=float).reshape(-1, 6)
    b = np.asarray(b, dtype=float).reshape(-1, 6)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=float)
    a_lo, a_sz = a[:, None, :3], a[:, None, 3:]
    b_lo, b_sz = b[None, :, :3], b[None, :, 3:]
    overlap = np.minimum(a_lo + a_sz, b_lo + b_sz) - np.maximum(a_lo, b_lo)
    np.clip(overlap, 0.0, None, out=overlap)
    inter = overlap.prod(axis=2)
    vol_a = a[:, 3:].prod(axis=1)[:, None]
    vol_b = b[:, 3:].prod(axis=1)[None, :]
    return inter / (vol_a + vol_b - inter)


def volumes_cc(boxes: np.ndarray, spacing: Spacing) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 6)
    return boxes[:, 3:].prod(axis=1) * (spacing.voxel_mm3 / 1000.0)


def bins_of_volumes(volumes: np.ndarray, cfg: BinningConfig) -> np.ndarray:
    """Vectorized volume binning; returns 1-based bin indices."""
    return np.searchsorted(np.asarray(cfg.edges), np.asarray(volumes), side="right") + 1

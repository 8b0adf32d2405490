"""Anchor-shape estimation and adaptation.

Anchor shapes are prototype (w, h, d) extents in voxels. They are estimated
by k-means over observed box shapes and pulled toward fresh estimates with an
exponential moving average between rounds. Centroids are always reported in
volume-ascending order so that the blend pairs like-sized anchors across
rounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box3, shape_of

__all__ = [
    "AnchorSet",
    "EmaConfig",
    "kmeans_shapes",
    "ema_update_anchors",
    "anchor_coverage",
    "coverage_many",
]

Shape = tuple[float, float, float]


@dataclass(frozen=True)
class AnchorSet:
    """An ordered set of anchor shapes plus the round that produced it."""

    shapes: tuple[Shape, ...]
    round: int = 0

    def __post_init__(self):
        if len(self.shapes) < 1:
            raise ValueError("anchor set needs at least one shape")
        shapes = tuple(tuple(float(v) for v in s) for s in self.shapes)
        for s in shapes:
            if len(s) != 3 or any(not (v > 0 and math.isfinite(v)) for v in s):
                raise ValueError(f"anchor shapes must be positive triples, got {s}")
        object.__setattr__(self, "shapes", shapes)
        if self.round < 0:
            raise ValueError("round must be nonnegative")

    @property
    def k(self) -> int:
        return len(self.shapes)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.shapes, dtype=float)


@dataclass(frozen=True)
class EmaConfig:
    """Momenta for the three moving averages (anchor, count prior, size prior)."""

    beta: float = 0.9
    alpha_mu: float = 0.9
    alpha_h: float = 0.9

    def __post_init__(self):
        for name in ("beta", "alpha_mu", "alpha_h"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


def _kmeans_pp_init(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centroids by squared distance."""
    n = pts.shape[0]
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = pts[rng.integers(n)]
        else:
            centroids[j] = pts[np.searchsorted(np.cumsum(d2 / total), rng.random())]
        d2 = np.minimum(d2, ((pts - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(pts: np.ndarray, k: int, rng: np.random.Generator) -> tuple[float, np.ndarray]:
    centroids = _kmeans_pp_init(pts, k, rng)
    assign = np.full(pts.shape[0], -1)
    d2 = np.zeros((pts.shape[0], k))
    for _ in range(100):
        d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        for j in range(k):
            if not np.any(new_assign == j):
                worst = int(d2[np.arange(len(pts)), new_assign].argmax())
                centroids[j] = pts[worst]
                new_assign[worst] = j
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            centroids[j] = pts[assign == j].mean(axis=0)
    sse = float(((pts - centroids[assign]) ** 2).sum())
    return sse, centroids


def kmeans_shapes(boxes: Sequence[Box3], k: int, seed: int, n_init: int = 8) -> list[Shape]:
    """Lloyd's k-means over box shapes, deterministic for a given seed.

    Runs ``n_init`` seeded k-means++ restarts and keeps the lowest
    within-cluster squared error. Returns centroids sorted by volume
    ascending. Empty clusters are repaired by promoting the point farthest
    from its assigned centroid. Raises if there are fewer boxes than
    clusters.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(boxes) < k:
        raise ValueError(f"k-means needs at least k={k} boxes, got {len(boxes)}")
    pts = np.asarray([shape_of(b) for b in boxes], dtype=float)
    rng = np.random.default_rng(seed)
    best_sse, best = math.inf, None
    for _ in range(max(1, n_init)):
        sse, centroids = _lloyd(pts, k, rng)
        if sse < best_sse:
            best_sse, best = sse, centroids
    order = np.argsort(best.prod(axis=1), kind="stable")
    return [tuple(map(float, best[j])) for j in order]


def ema_update_anchors(prev: AnchorSet, new_centroids: Sequence[Shape], beta: float) -> AnchorSet:
    """Blend fresh centroids into the anchor set: 1-beta on old, beta on new.

    Both sides are put in volume-ascending order before pairing so that each
    anchor tracks the like-ranked centroid. The round counter advances by one.
    """
    if len(new_centroids) != prev.k:
        raise ValueError(f"anchor count mismatch: have {prev.k}, got {len(new_centroids)}")
    old = prev.as_array()
    new = np.asarray([tuple(float(v) for v in s) for s in new_centroids], dtype=float)
    old = old[np.argsort(old.prod(axis=1), kind="stable")]
    new = new[np.argsort(new.prod(axis=1), kind="stable")]
    blended = (1.0 - beta) * old + beta * new
    return AnchorSet(tuple(tuple(map(float, row)) for row in blended), round=prev.round + 1)


def anchor_coverage(lesion_shape: Sequence[float], anchors: AnchorSet) -> float:
    """Best IoU between the lesion shape and any anchor shape when co-centered.

    Co-centered boxes overlap by min(extent, extent) along each axis, so this
    reduces to a volume-ratio style score in (0, 1]; it is 1 exactly when some
    anchor equals the lesion shape.
    """
    return float(coverage_many(np.asarray([lesion_shape], dtype=float), anchors)[0])


def coverage_many(shapes: np.ndarray, anchors: AnchorSet) -> np.ndarray:
    """Vectorized :func:`anchor_coverage` over an (N, 3) shape array."""
    shapes = np.asarray(shapes, dtype=float).reshape(-1, 3)
    a = anchors.as_array()
    inter = np.minimum(shapes[:, None, :], a[None, :, :]).prod(axis=2)
    union = shapes.prod(axis=1)[:, None] + a.prod(axis=1)[None, :] - inter
    return (inter / union).max(axis=1)

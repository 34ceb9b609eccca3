"""Exact nearest-neighbor search and weighted farthest point sampling.

Point counts here are small (at most a few thousand), so queries run as
exhaustive scans with a stable sort. That keeps results exactly equal to
brute force with lowest-index tie-breaking, which the rest of the
pipeline relies on for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud

__all__ = [
    "SpatialIndex", "NeighborSet", "build_index",
    "knn_spatial", "knn_spatial_batch", "knn_descriptor", "knn_descriptor_batch",
    "wfps",
]


@dataclass(frozen=True)
class NeighborSet:
    """k nearest indices into a reference set, distances ascending."""

    indices: np.ndarray
    distances: np.ndarray


@dataclass(frozen=True)
class SpatialIndex:
    """Immutable snapshot of a point set answering exact kNN queries."""

    points: np.ndarray

    def __len__(self):
        return self.points.shape[0]


def build_index(points) -> SpatialIndex:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 1:
        raise ValueError("cannot index an empty point set")
    pts = pts.reshape(-1, 3).copy()
    pts.setflags(write=False)
    return SpatialIndex(pts)


def _knn_rows(dist2: np.ndarray, k: int):
    """Per-row k smallest entries; stable argsort breaks ties by lower index."""
    order = np.argsort(dist2, axis=1, kind="stable")[:, :k]
    d = np.sqrt(np.take_along_axis(dist2, order, axis=1))
    return order, d


def knn_spatial_batch(index: SpatialIndex, queries: np.ndarray, k: int):
    """kNN of each query row; returns (indices (Q,k), distances (Q,k))."""
    if k > len(index):
        raise ValueError("k exceeds the number of indexed points")
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    d2 = ((q[:, None, :] - index.points[None, :, :]) ** 2).sum(axis=2)
    return _knn_rows(d2, k)


def knn_spatial(index: SpatialIndex, query, k: int) -> NeighborSet:
    idx, d = knn_spatial_batch(index, np.asarray(query).reshape(1, 3), k)
    return NeighborSet(idx[0], d[0])


def knn_descriptor_batch(descriptors: np.ndarray, queries: np.ndarray, k: int):
    """Exhaustive kNN in descriptor space; returns (indices, distances)."""
    ref = np.asarray(descriptors, dtype=np.float64)
    q = np.asarray(queries, dtype=np.float64)
    if ref.ndim != 2 or q.ndim != 2 or ref.shape[1] != q.shape[1]:
        raise ValueError("descriptor matrices must be 2D with equal widths")
    if k > ref.shape[0]:
        raise ValueError("k exceeds the number of reference descriptors")
    d2 = ((q ** 2).sum(axis=1)[:, None] - 2.0 * q @ ref.T
          + (ref ** 2).sum(axis=1)[None, :])
    return _knn_rows(np.maximum(d2, 0.0), k)


def knn_descriptor(descriptors, queries, k: int):
    idx, d = knn_descriptor_batch(descriptors, queries, k)
    return [NeighborSet(idx[i], d[i]) for i in range(idx.shape[0])]


def wfps(points, weights, count: int, seed: int = 0) -> np.ndarray:
    """Weighted farthest point sampling.

    Greedy selection maximizing weight(i) * min-distance(i, selected);
    the first pick is the argmax weight. Ties go to the lowest index. The
    seed is only consulted in the degenerate all-zero-score fallback.
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n = pts.shape[0]
    if count > n:
        raise ValueError("cannot sample more points than available")
    if w.shape != (n,) or not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite, nonnegative, one per point")

    selected = np.empty(count, dtype=np.int64)
    chosen = np.zeros(n, dtype=bool)
    rng = None
    first = int(np.argmax(w))
    if w[first] == 0.0:
        rng = np.random.default_rng(seed)
        first = int(rng.integers(n))
    selected[0] = first
    chosen[first] = True
    mind = np.linalg.norm(pts - pts[first], axis=1)

    for i in range(1, count):
        score = w * mind
        score[chosen] = -1.0
        best = int(np.argmax(score))
        if score[best] <= 0.0:
            if rng is None:
                rng = np.random.default_rng(seed)
            remaining = np.flatnonzero(~chosen)
            best = int(remaining[rng.integers(remaining.size)])
        selected[i] = best
        chosen[best] = True
        np.minimum(mind, np.linalg.norm(pts - pts[best], axis=1), out=mind)
    return selected

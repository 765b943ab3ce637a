"""k-means pseudo-labels.

Seeding is k-means++, refinement is Lloyd's algorithm, and clusters that
go empty are refilled by moving in the point farthest from its centroid.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import container, kernels
from .errors import NumericError
from .model import ModelParams, infer


@dataclass
class PseudoLabelTable:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    epoch_stamp: int = 0
    history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def members(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(self.k)]

    def save(self, path) -> None:
        container.save(path, {"labels": self.labels, "centroids": self.centroids},
                       {"inertia": self.inertia, "epoch_stamp": self.epoch_stamp, "n_iter": self.n_iter})

    @classmethod
    def load(cls, path) -> "PseudoLabelTable":
        arrays, meta = container.load(path)
        return cls(arrays["labels"], arrays["centroids"], meta["inertia"], meta["epoch_stamp"], n_iter=meta["n_iter"])


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; falls back to a uniform pick once all D^2 are zero."""
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = kernels.sq_distances(points, points[chosen]).ravel()
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            u = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), u, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, kernels.sq_distances(points, points[idx:idx + 1]).ravel())
    return points[chosen].copy()


def repair_empty(points, centroids, labels, dist, k):
    """Give every empty cluster the point farthest from its own centroid.

    Only points in clusters with more than one member are eligible; ties
    go to the lowest index. Mutates and returns ``centroids, labels, dist``.
    """
    counts = np.bincount(labels, minlength=k)
    for c in np.flatnonzero(counts == 0):
        eligible = counts[labels] > 1
        cand = np.where(eligible, dist, -np.inf)
        i = int(np.argmax(cand))
        counts[labels[i]] -= 1
        labels[i] = c
        counts[c] = 1
        centroids[c] = points[i]
        dist[i] = 0.0
    return centroids, labels, dist


def update_centroids(points, labels, k):
    out = np.empty((k, points.shape[1]), dtype=np.float64)
    for c in range(k):
        out[c] = points[labels == c].mean(axis=0)
    return out


def _assign(points, centroids, pool, chunks):
    if pool is None:
        return kernels.assign_nearest(points, centroids)
    # each row's nearest centroid is independent, so chunking changes nothing
    parts = list(pool.map(lambda sl: kernels.assign_nearest(points[sl], centroids), chunks))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Lexicographic row order; makes clustering a function of the point set, not the row order."""
    return np.lexsort(points.T[::-1]) if points.shape[1] else np.arange(points.shape[0])


def kmeans(points, k: int, seed: int, max_iter: int = 100, tol: float = 1e-6,
           init: np.ndarray | None = None, workers: int = 1) -> PseudoLabelTable:
    """Seeded k-means over the rows of ``points``.

    Rows are visited in :func:`canonical_order`, so permuting the input only
    permutes the labels. ``workers`` > 1 runs the assignment step on a thread pool.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be a matrix, got shape {points.shape}")
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must lie in [1, n={n}]")
    if not np.all(np.isfinite(points)):
        raise NumericError("kmeans: non-finite input points")
    order = canonical_order(points)
    sorted_pts = np.ascontiguousarray(points[order])
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(sorted_pts, k, rng) if init is None else np.array(init, dtype=np.float64)
    pool = ThreadPoolExecutor(workers) if workers > 1 and n >= 2 * workers else None
    bounds = np.linspace(0, n, workers + 1).astype(int)
    chunks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    try:
        sorted_labels, centroids, history, it = _lloyd(sorted_pts, centroids, k, max_iter, tol, pool, chunks)
    finally:
        if pool is not None:
            pool.shutdown()
    labels = np.empty(n, dtype=np.int64)
    labels[order] = sorted_labels
    diff = sorted_pts - centroids[sorted_labels]
    inertia = float((diff * diff).sum())
    return PseudoLabelTable(labels, centroids, inertia, history=history, n_iter=it)


def _lloyd(points, centroids, k, max_iter, tol, pool, chunks):
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        labels, dist = _assign(points, centroids, pool, chunks)
        centroids, labels, dist = repair_empty(points, centroids, labels, dist, k)
        history.append(float(dist.sum()))
        new = update_centroids(points, labels, k)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    return labels, centroids, history, it


def initial_features(params: ModelParams, images: np.ndarray) -> np.ndarray:
    """Pooled backbone features of the whole set, no augmentation."""
    return infer(params, images, what="features").astype(np.float64)


def recluster_embeddings(params: ModelParams, images: np.ndarray, k: int, seed: int,
                         epoch: int = 0, max_iter: int = 100, tol: float = 1e-6,
                         workers: int = 1) -> PseudoLabelTable:
    if images.shape[0] == 0:
        raise ValueError("cannot cluster an empty dataset")
    emb = infer(params, images, what="embed").astype(np.float64)
    table = kmeans(emb, k, seed, max_iter, tol, workers=workers)
    table.epoch_stamp = epoch
    return table
